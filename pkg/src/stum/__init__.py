"""Spatio-temporal unitized traffic forecasting on a small numpy autodiff engine."""

from .data import FrameSeries, SynthConfig, TrafficGraph, load_dataset, prepare, split_622, synth_generate
from .evaluation import evaluate, export_artifacts, metrics
from .model import StumConfig, StumModel, build_model, param_report
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "FrameSeries",
    "StumConfig",
    "StumModel",
    "SynthConfig",
    "TrafficGraph",
    "TrainConfig",
    "build_model",
    "evaluate",
    "export_artifacts",
    "load_dataset",
    "metrics",
    "param_report",
    "prepare",
    "split_622",
    "synth_generate",
    "train",
]
