"""RGB/depth sample ingestion, flip augmentation, batching and synthetic scenes."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Protocol, Sequence

import numpy as np
from PIL import Image

from .losses import DepthMap, depth_transform

DEFAULT_DEPTH_SCALE = 0.001  # millimetre rasters
EIGHT_BIT_DEPTH_SCALE = 10.0 / 255.0  # 8-bit rasters spanning 0..10 m


class DataError(ValueError):
    pass


@dataclass
class Sample:
    rgb: np.ndarray  # float32 [3, H, W] in [0, 1]
    depth: DepthMap  # meters
    id: str

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise DataError(f"{self.id}: rgb must be 3 x H x W, got {self.rgb.shape}")
        if self.rgb.shape[1:] != self.depth.shape:
            raise DataError(f"{self.id}: rgb extent {self.rgb.shape[1:]} != depth extent "
                            f"{self.depth.shape}")


@dataclass
class Manifest:
    records: list[tuple[Path, Path]]
    depth_scale: float = DEFAULT_DEPTH_SCALE
    split: str = "train"
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.records)

    def ids(self) -> list[str]:
        return [_record_id(self.root, r) for r, _ in self.records]


def _record_id(root: Path, rgb: Path) -> str:
    try:
        return rgb.relative_to(root).as_posix()
    except ValueError:
        return rgb.as_posix()


def load_manifest(path: str | os.PathLike, depth_scale: float = DEFAULT_DEPTH_SCALE,
                  split: str = "train") -> Manifest:
    """Read a headerless ``rgb_path,depth_path`` CSV; paths are relative to the file."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    if depth_scale <= 0:
        raise DataError("depth_scale must be positive")
    root = path.parent
    records = []
    seen: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as f:
        for row_no, row in enumerate(csv.reader(f), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2 or not row[0].strip() or not row[1].strip():
                raise DataError(f"{path}: row {row_no}: expected 2 columns rgb_path,depth_path")
            rgb, depth = (root / row[0].strip(), root / row[1].strip())
            for p, what in ((rgb, "rgb"), (depth, "depth")):
                if not p.is_file():
                    raise DataError(f"{path}: row {row_no}: {what} file not found: {p}")
            rid = _record_id(root, rgb)
            if rid in seen:
                raise DataError(f"{path}: row {row_no}: duplicate id {rid!r} "
                                f"(first seen on row {seen[rid]})")
            seen[rid] = row_no
            records.append((rgb, depth))
    return Manifest(records, depth_scale=depth_scale, split=split, root=root)


def _read_rgb(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode rgb raster {path}: {exc}") from None
    return (arr.astype(np.float32) / np.float32(255.0)).transpose(2, 0, 1).copy()


def _read_depth_raw(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "I;16", "I;16L", "I;16B", "I"):
                raise DataError(f"{path}: depth raster must be single-channel, got mode {im.mode}")
            arr = np.array(im)
    except (OSError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"cannot decode depth raster {path}: {exc}") from None
    return arr.astype(np.float64)


def load_sample(manifest: Manifest, index: int, max_depth: float = 10.0) -> Sample:
    if not 0 <= index < len(manifest):
        raise IndexError(f"sample index {index} out of range for {len(manifest)} records")
    rgb_path, depth_path = manifest.records[index]
    rgb = _read_rgb(rgb_path)
    raw = _read_depth_raw(depth_path)
    if raw.shape != rgb.shape[1:]:
        raise DataError(f"{rgb_path.name}: rgb extent {rgb.shape[1:]} != depth extent {raw.shape}")
    depth = raw * manifest.depth_scale
    valid = (raw > 0) & (depth <= max_depth)
    depth = np.where(valid, depth, 0.0)
    return Sample(rgb, DepthMap(depth, valid), _record_id(manifest.root, rgb_path))


def flip_sample(sample: Sample) -> Sample:
    return Sample(sample.rgb[:, :, ::-1].copy(),
                  DepthMap(sample.depth.depth[:, ::-1].copy(), sample.depth.valid[:, ::-1].copy()),
                  sample.id)


def augment_flip(sample: Sample, rng: np.random.Generator, p: float = 0.5) -> Sample:
    """Mirror rgb and depth together with probability ``p`` (one draw per call)."""
    return flip_sample(sample) if rng.random() < p else sample


# ------------------------------------------------------------------- datasets
class Dataset(Protocol):
    def __len__(self) -> int: ...
    def __getitem__(self, i: int) -> Sample: ...


class ManifestDataset:
    def __init__(self, manifest: Manifest, max_depth: float = 10.0):
        self.manifest, self.max_depth = manifest, max_depth

    def __len__(self):
        return len(self.manifest)

    def __getitem__(self, i):
        return load_sample(self.manifest, i, self.max_depth)


class SyntheticDataset:
    def __init__(self, n: int, height: int = 32, width: int = 32, seed: int = 0):
        self.n, self.height, self.width, self.seed = n, height, width, seed

    def __len__(self):
        return self.n

    def __getitem__(self, i):
        if not 0 <= i < self.n:
            raise IndexError(i)
        return synth_scene(self.seed + i, self.height, self.width)


# -------------------------------------------------------------------- batches
def area_downsample2x(values: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Average valid pixels over 2x2 blocks; a block is valid if any pixel is."""
    h, w = values.shape[-2:]
    if h % 2 or w % 2:
        raise DataError(f"cannot halve odd extent {h}x{w}")
    shape = values.shape[:-2] + (h // 2, 2, w // 2, 2)
    vals = np.where(valid, values, 0).reshape(shape).sum(axis=(-3, -1))
    counts = valid.reshape(shape).sum(axis=(-3, -1))
    out_valid = counts > 0
    out = np.where(out_valid, vals / np.maximum(counts, 1), 0)
    return out, out_valid


@dataclass
class Batch:
    rgb: np.ndarray  # [N, 3, H, W]
    target: np.ndarray  # [N, 1, h, w] transformed depth
    mask: np.ndarray  # [N, 1, h, w] bool
    ids: list[str]
    depth: list[DepthMap]  # full-resolution ground truth in meters


def flip_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index, 0xF11B])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


class BatchPlan:
    """Deterministic batch stream for one epoch.

    The order depends only on ``(shuffle_seed, epoch)``; flip decisions only on
    ``(shuffle_seed, epoch, sample index)``. Worker threads decode samples but
    results are delivered in plan order.
    """

    def __init__(self, dataset: Dataset, batch_size: int, shuffle_seed: int, epoch: int,
                 output_scale: str = "half", max_depth: float = 10.0, min_depth: float = 1.0,
                 augment: bool = False, shuffle: bool = True, workers: int = 1):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if len(dataset) == 0:
            raise DataError("empty dataset")
        self.dataset, self.batch_size = dataset, batch_size
        self.seed, self.epoch = shuffle_seed, epoch
        self.output_scale, self.max_depth, self.min_depth = output_scale, max_depth, min_depth
        self.augment, self.workers = augment, workers
        n = len(dataset)
        self.order = epoch_order(n, shuffle_seed, epoch) if shuffle else np.arange(n)

    def __len__(self) -> int:
        return -(-len(self.order) // self.batch_size)

    def sizes(self) -> list[int]:
        n, b = len(self.order), self.batch_size
        return [min(b, n - i) for i in range(0, n, b)]

    def _load(self, index: int) -> Sample:
        s = self.dataset[int(index)]
        if self.augment:
            s = augment_flip(s, flip_rng(self.seed, self.epoch, int(index)))
        return s

    def _collate(self, samples: Sequence[Sample]) -> Batch:
        rgb = np.stack([s.rgb for s in samples]).astype(np.float32)
        targets, masks = [], []
        for s in samples:
            t = depth_transform(s.depth, self.max_depth, self.min_depth)
            vals, valid = t.depth, t.valid
            if self.output_scale == "half":
                vals, valid = area_downsample2x(vals, valid)
            targets.append(vals)
            masks.append(valid)
        return Batch(rgb, np.stack(targets)[:, None].astype(np.float32),
                     np.stack(masks)[:, None], [s.id for s in samples],
                     [s.depth for s in samples])

    def batch(self, i: int) -> Batch:
        idx = self.order[i * self.batch_size:(i + 1) * self.batch_size]
        if len(idx) == 0:
            raise IndexError(i)
        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                samples = list(pool.map(self._load, idx))
        else:
            samples = [self._load(j) for j in idx]
        return self._collate(samples)

    def __iter__(self) -> Iterator[Batch]:
        for i in range(len(self)):
            yield self.batch(i)


def make_batches(dataset: Dataset | Manifest, batch_size: int, shuffle_seed: int, epoch: int,
                 **kwargs) -> BatchPlan:
    if isinstance(dataset, Manifest):
        dataset = ManifestDataset(dataset, kwargs.get("max_depth", 10.0))
    return BatchPlan(dataset, batch_size, shuffle_seed, epoch, **kwargs)


# ------------------------------------------------------------ synthetic scenes
def synth_scene(seed: int, height: int = 32, width: int = 32) -> Sample:
    """Procedural indoor-like scene with analytic depth in [1, 10] m.

    A tilted plane forms the background; one to four axis-aligned boxes sit
    in front at distinct depths. Colour shading darkens with distance and a
    faint seeded texture is added on top.
    """
    if height < 16 or width < 16:
        raise ValueError("synthetic scenes need H, W >= 16")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width), indexing="ij")
    far = rng.uniform(6.0, 9.5)
    depth = far - rng.uniform(2.0, 4.5) * yy + rng.uniform(-1.5, 1.5) * xx
    depth = np.clip(depth, 1.0, 10.0)

    base = rng.uniform(0.35, 1.0, size=3)
    color = np.broadcast_to(base[:, None, None], (3, height, width)).copy()
    n_boxes = int(rng.integers(1, 5))
    levels = rng.choice(np.arange(1.5, 8.0, 0.5), size=n_boxes, replace=False)
    for d in np.sort(levels)[::-1]:  # far boxes first so near ones occlude
        bh = int(rng.integers(height // 8, height // 2 + 1))
        bw = int(rng.integers(width // 8, width // 2 + 1))
        top = int(rng.integers(0, height - bh + 1))
        left = int(rng.integers(0, width - bw + 1))
        depth[top:top + bh, left:left + bw] = d
        color[:, top:top + bh, left:left + bw] = rng.uniform(0.35, 1.0, size=3)[:, None, None]

    shade = 1.0 - 0.7 * (depth - 1.0) / 9.0
    rgb = color * shade[None] + 0.03 * rng.standard_normal((3, height, width))
    rgb = np.clip(rgb, 0.0, 1.0).astype(np.float32)
    return Sample(rgb, DepthMap(depth, np.ones_like(depth, dtype=bool)), f"synth-{seed}")


def write_synthetic_dataset(out_dir: str | os.PathLike, n: int, height: int = 32,
                            width: int = 32, seed: int = 0) -> Path:
    """Render ``n`` scenes as 8-bit RGB and 16-bit millimetre depth PNGs plus a manifest."""
    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n):
        s = synth_scene(seed + i, height, width)
        rgb8 = np.round(s.rgb.transpose(1, 2, 0) * 255).astype(np.uint8)
        mm = np.round(s.depth.depth * 1000).astype(np.uint16)
        name = f"{i:05d}.png"
        Image.fromarray(rgb8, "RGB").save(out / "rgb" / name)
        Image.fromarray(mm).save(out / "depth" / name)
        rows.append((f"rgb/{name}", f"depth/{name}"))
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as f:
        csv.writer(f, lineterminator="\n").writerows(rows)
    return manifest
