"""U-Net depth network with a DenseNet-style encoder.

The encoder is a stem followed by dense blocks joined by transition layers.
Each downsampling step leaves a skip feature map behind; the decoder walks
back up with bilinear 2x upsampling, concatenates the matching skip, and
applies two 3x3 conv + ReLU. A 3x3 conv + softplus head produces a strictly
positive single-channel map.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import checkpoint, ops
from .autodiff import Tensor, no_grad
from .ops import RunningStats, ShapeError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
BOTTLENECK_WIDTH = 4  # 1x1 conv widens to 4 * growth_rate


class BuildError(ValueError):
    pass


@dataclass
class NetworkConfig:
    input_channels: int = 3
    stem: str = "conv3"  # "conv3": 3x3/2 conv; "conv7_pool": 7x7/2 conv + 3x3/2 max-pool
    stem_features: int = 8
    growth_rate: int = 4
    block_layout: list[int] = field(default_factory=lambda: [2, 2])
    compression: float = 0.5
    # widths from the bottleneck outwards; one entry per downsampling step
    decoder_features: list[int] = field(default_factory=lambda: [16, 8])
    output_scale: str = "half"
    seed: int = 0

    def validate(self) -> None:
        if not self.block_layout or any(n < 1 for n in self.block_layout):
            raise BuildError("block_layout must be non-empty with all counts >= 1")
        if not 0 < self.compression <= 1:
            raise BuildError("compression must lie in (0, 1]")
        if self.stem not in ("conv3", "conv7_pool"):
            raise BuildError(f"unknown stem {self.stem!r}")
        if self.output_scale not in ("half", "full"):
            raise BuildError("output_scale must be 'half' or 'full'")
        if min(self.input_channels, self.stem_features, self.growth_rate) < 1:
            raise BuildError("channel counts must be positive")
        if len(self.decoder_features) != self.num_downsamplings:
            raise BuildError(
                f"decoder_features has {len(self.decoder_features)} stages but the encoder "
                f"downsamples {self.num_downsamplings} times")
        if any(f < 1 for f in self.decoder_features):
            raise BuildError("decoder widths must be positive")

    @property
    def num_downsamplings(self) -> int:
        stem = 2 if self.stem == "conv7_pool" else 1
        return stem + len(self.block_layout) - 1

    @property
    def num_up_stages(self) -> int:
        return self.num_downsamplings - (1 if self.output_scale == "half" else 0)

    @property
    def input_multiple(self) -> int:
        return 2 ** self.num_downsamplings

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise BuildError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "densenet121": dict(stem="conv7_pool", stem_features=64, growth_rate=32,
                        block_layout=[6, 12, 24, 16], compression=0.5,
                        decoder_features=[128, 64, 32, 16, 8]),
    "toy": dict(stem="conv3", stem_features=8, growth_rate=4, block_layout=[2, 2],
                compression=0.5, decoder_features=[16, 8]),
}


def preset(name: str, **overrides) -> NetworkConfig:
    if name not in PRESETS:
        raise BuildError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return NetworkConfig(**{**PRESETS[name], **overrides})


# ------------------------------------------------------------------- layers
class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, list):
                for m in val:
                    if isinstance(m, Module):
                        yield from m.named_parameters(f"{prefix}{m.name}.")

    def named_stats(self, prefix: str = "") -> Iterator[tuple[str, RunningStats]]:
        for key, val in vars(self).items():
            if isinstance(val, RunningStats):
                yield prefix.rstrip("."), val
            elif isinstance(val, Module):
                yield from val.named_stats(f"{prefix}{key}.")
            elif isinstance(val, list):
                for m in val:
                    if isinstance(m, Module):
                        yield from m.named_stats(f"{prefix}{m.name}.")


def _he_normal(rng: np.random.Generator, shape, dtype) -> Tensor:
    fan_in = int(np.prod(shape[1:]))
    w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return Tensor(w.astype(dtype), requires_grad=True)


class Conv(Module):
    def __init__(self, rng, cin, cout, k, stride=1, padding=0, bias=False, dtype=np.float32):
        self.weight = _he_normal(rng, (cout, cin, k, k), dtype)
        if bias:
            self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self._bias = bias
        self.stride, self.padding = stride, padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias if self._bias else None,
                          stride=self.stride, padding=self.padding)


class BatchNorm(Module):
    def __init__(self, channels, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.stats = RunningStats(channels, dtype)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.stats, mode,
                              momentum=BN_MOMENTUM, eps=BN_EPS)


class DenseLayer(Module):
    def __init__(self, rng, name, cin, growth, dtype):
        self.name = name
        width = BOTTLENECK_WIDTH * growth
        self.norm1 = BatchNorm(cin, dtype)
        self.conv1 = Conv(rng, cin, width, 1, dtype=dtype)
        self.norm2 = BatchNorm(width, dtype)
        self.conv2 = Conv(rng, width, growth, 3, padding=1, dtype=dtype)

    def __call__(self, x, mode):
        h = self.conv1(ops.relu(self.norm1(x, mode)))
        h = self.conv2(ops.relu(self.norm2(h, mode)))
        return ops.concat_channels(x, h)


class Transition(Module):
    def __init__(self, rng, name, cin, cout, dtype):
        self.name = name
        self.norm = BatchNorm(cin, dtype)
        self.conv = Conv(rng, cin, cout, 1, dtype=dtype)

    def __call__(self, x, mode):
        return ops.avg_pool2d(self.conv(ops.relu(self.norm(x, mode))), 2, 2)


class UpStage(Module):
    def __init__(self, rng, name, cin, cskip, cout, dtype):
        self.name = name
        self.conv1 = Conv(rng, cin + cskip, cout, 3, padding=1, bias=True, dtype=dtype)
        self.conv2 = Conv(rng, cout, cout, 3, padding=1, bias=True, dtype=dtype)

    def __call__(self, x, skip):
        h = ops.concat_channels(ops.bilinear_upsample2x(x), skip)
        return ops.relu(self.conv2(ops.relu(self.conv1(h))))


class _Named(Module):
    def __init__(self, name):
        self.name = name


class Network(Module):
    """Encoder-decoder built from a :class:`NetworkConfig`."""

    def __init__(self, config: NetworkConfig, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed)
        c = config

        enc = _Named("encoder")
        k, stride, pad = (7, 2, 3) if c.stem == "conv7_pool" else (3, 2, 1)
        enc.conv0 = Conv(rng, c.input_channels, c.stem_features, k, stride, pad, dtype=dtype)
        enc.norm0 = BatchNorm(c.stem_features, dtype)
        # skip widths indexed by resolution level (0 = input resolution)
        skip_channels = [c.input_channels, c.stem_features]
        if c.stem == "conv7_pool":
            skip_channels.append(c.stem_features)
        width = c.stem_features
        # blocks and transitions interleaved, in execution order
        enc.stages = []
        for b, n_layers in enumerate(c.block_layout, start=1):
            layers = _Named(f"block{b}")
            layers.layers = []
            for i in range(1, n_layers + 1):
                layers.layers.append(DenseLayer(rng, f"layer{i}", width, c.growth_rate, dtype))
                width += c.growth_rate
            enc.stages.append(layers)
            if b < len(c.block_layout):
                out = int(np.floor(width * c.compression))
                if out < 1:
                    raise BuildError(f"transition{b} compresses {width} channels to zero")
                enc.stages.append(Transition(rng, f"transition{b}", width, out, dtype))
                width = out
                skip_channels.append(width)
        enc.norm5 = BatchNorm(width, dtype)
        self.encoder = enc
        bottleneck_level = len(skip_channels) - 1
        if bottleneck_level != c.num_downsamplings:
            raise BuildError("encoder skip bookkeeping disagrees with the downsampling count")
        self.skip_channels = skip_channels[:-1]

        dec = _Named("decoder")
        dec.stages = []
        cin = width
        for s in range(1, c.num_up_stages + 1):
            level = bottleneck_level - s
            cout = c.decoder_features[s - 1]
            dec.stages.append(UpStage(rng, f"up{s}", cin, skip_channels[level], cout, dtype))
            cin = cout
        self.decoder = dec
        self.head = Conv(rng, cin, 1, 3, padding=1, bias=True, dtype=dtype)
        self._check_skip_shapes()
        names = [n for n, _ in self.named_parameters()]
        if len(set(names)) != len(names):
            raise BuildError("duplicate parameter names")

    def _check_skip_shapes(self) -> None:
        """Trace spatial extents symbolically and confirm every skip lines up."""
        size = self.config.input_multiple
        extents = [size]
        conv_out = ops._out_extent
        k, stride, pad = (7, 2, 3) if self.config.stem == "conv7_pool" else (3, 2, 1)
        extents.append(conv_out(extents[-1], k, stride, pad))
        if self.config.stem == "conv7_pool":
            extents.append(conv_out(extents[-1], 3, 2, 1))
        for _ in range(len(self.config.block_layout) - 1):
            extents.append(conv_out(extents[-1], 2, 2, 0))
        cur = extents[-1]
        for s in range(1, self.config.num_up_stages + 1):
            cur *= 2
            skip = extents[len(extents) - 1 - s]
            if cur != skip:
                raise BuildError(f"decoder stage {s}: upsampled extent {cur} != skip extent {skip}")

    # ---------------------------------------------------------------- forward
    def encode(self, x: Tensor, mode: str) -> tuple[Tensor, list[Tensor]]:
        enc = self.encoder
        skips = [x]
        h = ops.relu(enc.norm0(enc.conv0(x), mode))
        skips.append(h)
        if self.config.stem == "conv7_pool":
            h = ops.max_pool2d(h, 3, 2, padding=1)
            skips.append(h)
        for stage in enc.stages:
            if isinstance(stage, Transition):
                h = stage(h, mode)
                skips.append(h)
            else:
                for layer in stage.layers:
                    h = layer(h, mode)
        h = ops.relu(enc.norm5(h, mode))
        return h, skips[:-1]

    def forward(self, image: Tensor, mode: str = "eval") -> Tensor:
        if image.ndim != 4 or image.shape[1] != self.config.input_channels:
            raise ShapeError(f"expected N x {self.config.input_channels} x H x W input, "
                             f"got {image.shape}")
        m = self.config.input_multiple
        h, w = image.shape[2:]
        if h % m or w % m:
            raise ShapeError(f"input extent {h}x{w} must be a multiple of {m}")
        if image.dtype != self.dtype:
            image = Tensor(image.data.astype(self.dtype))
        x, skips = self.encode(image, mode)
        for s, stage in enumerate(self.decoder.stages, start=1):
            x = stage(x, skips[len(skips) - s])
        return ops.softplus(self.head(x))

    __call__ = forward

    def predict(self, image: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(Tensor(image, dtype=self.dtype), "eval").data

    # ------------------------------------------------------------- accounting
    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def layer_table(self) -> list[tuple[str, tuple[int, ...], int]]:
        return [(n, p.shape, p.size) for n, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # ----------------------------------------------------------- persistence
    def state_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [(n, p.data) for n, p in self.named_parameters()]
        for n, st in self.named_stats():
            out.append((f"{n}.running_mean", st.mean))
            out.append((f"{n}.running_var", st.var))
            out.append((f"{n}.num_batches", np.array(float(st.num_batches))))
        return out

    def load_state(self, tensors: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.state_tensors())
        missing = [n for n in own if n not in tensors]
        if missing:
            raise checkpoint.CheckpointError(f"checkpoint lacks tensor {missing[0]!r}")
        if strict:
            extra = [n for n in tensors if n not in own]
            if extra:
                raise checkpoint.CheckpointError(f"unexpected tensor {extra[0]!r} in checkpoint")
        for n, arr in tensors.items():
            if n in own and np.shape(arr) != np.shape(own[n]):
                raise checkpoint.CheckpointError(
                    f"tensor {n!r} has shape {np.shape(arr)}, expected {np.shape(own[n])}")
        for n, p in self.named_parameters():
            p.data = tensors[n].astype(self.dtype, copy=True)
        for n, st in self.named_stats():
            st.mean = tensors[f"{n}.running_mean"].astype(self.dtype, copy=True)
            st.var = tensors[f"{n}.running_var"].astype(self.dtype, copy=True)
            st.num_batches = int(tensors[f"{n}.num_batches"])

    def checkpoint_config(self) -> dict:
        return {"network": self.config.to_dict()}

    def to_bytes(self, extra: list[tuple[str, np.ndarray]] | None = None,
                 extra_config: dict | None = None) -> bytes:
        cfg = self.checkpoint_config()
        if extra_config:
            cfg.update(extra_config)
        return checkpoint.encode(cfg, self.state_tensors() + list(extra or []))

    def size_bytes(self) -> int:
        return len(self.to_bytes())


def build(config: NetworkConfig | str, dtype=np.float32) -> Network:
    if isinstance(config, str):
        config = preset(config)
    return Network(config, dtype=dtype)


def param_count(net: Network) -> int:
    return net.param_count()


def size_report(net: Network) -> int:
    """Serialized checkpoint length in bytes."""
    return net.size_bytes()


def save(net: Network, path: str | os.PathLike) -> int:
    return checkpoint.write(path, net.checkpoint_config(), net.state_tensors())


def from_checkpoint(config: dict, tensors: dict[str, np.ndarray], strict: bool = True) -> Network:
    if "network" not in config:
        raise checkpoint.CheckpointError("checkpoint config has no 'network' section")
    cfg = NetworkConfig.from_dict(config["network"])
    first = next(iter(tensors.values()), None)
    dtype = first.dtype if first is not None else np.float32
    net = Network(cfg, dtype=dtype)
    net.load_state(tensors, strict=strict)
    return net


def load(path: str | os.PathLike) -> Network:
    config, tensors = checkpoint.read(path)
    return from_checkpoint(config, tensors)
