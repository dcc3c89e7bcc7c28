"""Behaviour pseudo-labels from deep clustering, fed to a sparse spatio-temporal graph predictor."""

from .data import Scene, Window, gen_synthetic, make_windows
from .evaluation import MetricsReport, ade_fde, evaluate
from .pipeline import BPSGCN, TrainConfig, train

__all__ = [
    "BPSGCN",
    "MetricsReport",
    "Scene",
    "TrainConfig",
    "Window",
    "ade_fde",
    "evaluate",
    "gen_synthetic",
    "make_windows",
    "train",
]

__version__ = "0.1.0"
