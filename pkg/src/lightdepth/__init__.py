"""Monocular depth estimation on a small numpy autodiff core."""

from .autodiff import NonFiniteError, Tensor, backward, no_grad
from .checkpoint import CheckpointError
from .data import DataError, Manifest, Sample, SyntheticDataset, load_manifest, make_batches
from .losses import DepthMap, LossConfig, composite_loss, depth_transform
from .metrics import MetricsReport, evaluate
from .network import Network, NetworkConfig, build, load, preset, save
from .ops import ShapeError, StateError
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "no_grad", "NonFiniteError", "ShapeError", "StateError",
    "CheckpointError", "DataError", "Manifest", "Sample", "SyntheticDataset",
    "load_manifest", "make_batches", "DepthMap", "LossConfig", "composite_loss",
    "depth_transform", "MetricsReport", "evaluate", "Network", "NetworkConfig",
    "build", "load", "preset", "save", "TrainConfig", "train",
]
