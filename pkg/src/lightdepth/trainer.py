"""Training loop: Adam on the composite depth loss, with CSV logging and
resumable checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, network
from .autodiff import NonFiniteError, Tensor
from .data import Dataset, make_batches
from .losses import LossConfig, composite_loss

logger = logging.getLogger(__name__)

LOG_HEADER = ["step", "epoch", "l1", "l1_grad", "l_ssim", "total", "wall_ms"]

# Published reference points used only for informational comparison output.
REFERENCE_SIZES_MB = {"MonoDepth": 343, "DenseNet": 165, "U-Net + DenseNet-121 (reported)": 144}
REFERENCE_PARAMS = 8_000_000


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0  # steps; 0 writes only the final checkpoint
    precision: int = 32
    augment: bool = True
    workers: int = 1
    max_steps: int | None = None
    record_wall_time: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        # zero is accepted: it freezes parameters while still collecting BN statistics
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


@dataclass
class TrainLogRecord:
    step: int
    epoch: int
    l1: float
    l1_grad: float
    l_ssim: float
    total: float
    wall_ms: float

    def row(self) -> list[str]:
        return [str(self.step), str(self.epoch), repr(self.l1), repr(self.l1_grad),
                repr(self.l_ssim), repr(self.total), f"{self.wall_ms:.3f}"]


# ---------------------------------------------------------------------- Adam
@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None],
              state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Parameters without a gradient are treated as having a zero gradient.
    """
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        elif state.m[name].shape != p.shape:
            raise ValueError(f"optimizer state for {name!r} has the wrong shape")
        dt = p.dtype.type
        m = dt(beta1) * state.m[name] + dt(1 - beta1) * g
        v = dt(beta2) * state.v[name] + dt(1 - beta2) * (g * g)
        m_hat = m / dt(1 - beta1 ** t)
        v_hat = v / dt(1 - beta2 ** t)
        p -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))
        state.m[name], state.v[name] = m, v


# ----------------------------------------------------------------- checkpoints
def save_training_checkpoint(path, net: network.Network, state: AdamState,
                             train_cfg: TrainConfig, loss_cfg: LossConfig) -> int:
    extra = []
    for name, _ in net.named_parameters():
        if name in state.m:
            extra.append((f"adam.m.{name}", state.m[name]))
            extra.append((f"adam.v.{name}", state.v[name]))
    extra.append(("adam.step", np.array(float(state.step))))
    cfg = net.checkpoint_config()
    cfg["train"] = dataclasses.asdict(train_cfg)
    cfg["loss"] = dataclasses.asdict(loss_cfg)
    return checkpoint.write(path, cfg, net.state_tensors() + extra)


def load_training_checkpoint(path) -> tuple[network.Network, AdamState, dict]:
    config, tensors = checkpoint.read(path)
    net_tensors = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    net = network.from_checkpoint(config, net_tensors)
    state = AdamState()
    for name, _ in net.named_parameters():
        if f"adam.m.{name}" in tensors:
            state.m[name] = tensors[f"adam.m.{name}"].astype(net.dtype)
            state.v[name] = tensors[f"adam.v.{name}"].astype(net.dtype)
    if "adam.step" in tensors:
        state.step = int(tensors["adam.step"])
    return net, state, config


# ----------------------------------------------------------------------- loop
@dataclass
class TrainResult:
    net: network.Network
    log: list[TrainLogRecord]
    state: AdamState
    final_checkpoint: Path | None


def _write_log(path: Path, records: list[TrainLogRecord]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for r in records:
        w.writerow(r.row())
    path.write_text(buf.getvalue(), encoding="utf-8")


def train(net: network.Network, dataset: Dataset, train_cfg: TrainConfig,
          loss_cfg: LossConfig | None = None, out_dir: str | os.PathLike | None = None,
          state: AdamState | None = None) -> TrainResult:
    """Run Adam over ``dataset`` for ``train_cfg.epochs`` epochs.

    Passing the ``state`` restored from a training checkpoint resumes at the
    step after the one it was written at.
    """
    loss_cfg = loss_cfg or LossConfig()
    state = state or AdamState()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    params = dict(net.named_parameters())
    records: list[TrainLogRecord] = []
    last_ckpt: Path | None = None
    start = state.step
    step = start
    scale = net.config.output_scale

    def checkpoint_to(name: str) -> Path:
        path = out / name
        save_training_checkpoint(path, net, state, train_cfg, loss_cfg)
        return path

    stop = False
    for epoch in range(train_cfg.epochs):
        plan = make_batches(dataset, train_cfg.batch_size, train_cfg.seed, epoch,
                            output_scale=scale, max_depth=loss_cfg.max_depth,
                            min_depth=loss_cfg.min_depth, augment=train_cfg.augment,
                            workers=train_cfg.workers)
        first = epoch * len(plan)
        for bi in range(len(plan)):
            if first + bi < start:
                continue
            if train_cfg.max_steps is not None and step >= train_cfg.max_steps:
                stop = True
                break
            t0 = time.perf_counter()
            batch = plan.batch(bi)
            net.zero_grad()
            try:
                pred = net.forward(Tensor(batch.rgb, dtype=net.dtype), "train")
                losses = composite_loss(Tensor(batch.target, dtype=net.dtype), pred,
                                        loss_cfg, batch.mask)
                if not np.isfinite(losses.total.data).all():
                    raise NonFiniteError("total loss")
                losses.total.backward()
            except NonFiniteError as exc:
                raise TrainingError(
                    f"non-finite loss at step {step + 1} ({exc}); "
                    f"last good checkpoint: {last_ckpt or 'none written'}") from None
            adam_step({n: p.data for n, p in params.items()},
                      {n: p.grad for n, p in params.items()}, state,
                      train_cfg.learning_rate, train_cfg.beta1, train_cfg.beta2,
                      train_cfg.eps_adam)
            step = state.step
            wall = (time.perf_counter() - t0) * 1000 if train_cfg.record_wall_time else 0.0
            v = losses.values
            records.append(TrainLogRecord(step, epoch, v["l1"], v["l1_grad"], v["l_ssim"],
                                          v["total"], wall))
            logger.debug("step %d epoch %d loss %.6f", step, epoch, v["total"])
            if out is not None and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
                last_ckpt = checkpoint_to(f"step_{step:06d}.mdec")
        if stop:
            break

    final = None
    if out is not None:
        final = checkpoint_to("final.mdec")
        _write_log(out / "train_log.csv", records)
    net.zero_grad()
    return TrainResult(net, records, state, final)


def size_report(net: network.Network) -> dict:
    nbytes = net.size_bytes()
    count = net.param_count()
    lines = [f"parameters: {count:,}  checkpoint: {nbytes:,} bytes ({nbytes / 2**20:.2f} MB)",
             f"reference parameter count: ~{REFERENCE_PARAMS / 1e6:.0f} million",
             "reference model sizes: " + ", ".join(f"{k} {v} MB"
                                                   for k, v in REFERENCE_SIZES_MB.items())]
    return {"param_count": count, "checkpoint_bytes": nbytes,
            "megabytes": nbytes / 2**20, "text": "\n".join(lines)}
