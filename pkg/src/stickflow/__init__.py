"""Variational inference with stick-breaking mixture bases, a shared
invertible backbone, and per-component directional tail adaptation."""

from .base_mixture import StickBreakingBase, expected_weights, init_base
from .numerics import RngStream
from .tail_estimator import TailIndexTable, build_table, estimate_directional
from .tail_transform import LIGHT, TtfParams, ttf_forward, ttf_inverse
from .targets import TargetDensity, make_target
from .vi import (
    MixtureTailFlow,
    ModelConfig,
    TrainConfig,
    model_log_density,
    sample,
    train,
    weighted_elbo,
)

__all__ = [
    "RngStream",
    "StickBreakingBase",
    "expected_weights",
    "init_base",
    "TailIndexTable",
    "build_table",
    "estimate_directional",
    "LIGHT",
    "TtfParams",
    "ttf_forward",
    "ttf_inverse",
    "TargetDensity",
    "make_target",
    "MixtureTailFlow",
    "ModelConfig",
    "TrainConfig",
    "model_log_density",
    "sample",
    "train",
    "weighted_elbo",
]

__version__ = "0.1.0"
