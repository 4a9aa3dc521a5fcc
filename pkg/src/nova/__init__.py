"""Entropy-guided training-free acceleration for a toy next-scale
autoregressive generator."""

from .engine import RunConfig, RunResult, compare_runs, run_generation
from .entropy import ActivationParams, EntropyTrace
from .model import ModelConfig, ScaleSchedule, build_model
from .scheduler import LinkageParams, SchedulerMode

__all__ = [
    "ActivationParams",
    "EntropyTrace",
    "LinkageParams",
    "ModelConfig",
    "RunConfig",
    "RunResult",
    "ScaleSchedule",
    "SchedulerMode",
    "build_model",
    "compare_runs",
    "run_generation",
]
