"""Checkpoint-merging benchmark for a small trajectory planner on synthetic crowd domains."""

from .errors import (
    FormatError,
    InputError,
    LayoutError,
    NumericError,
    PlanMergeError,
    SpecError,
    StateError,
    TrainingError,
)
from .metrics import MetricReport, ade, collision_rate, evaluate, fde, miss_rate
from .net import ActivationBundle, Planner, PlannerConfig
from .params import GroupLayout, ParamVector, compose, task_vector
from .scenes import Scene

__all__ = [
    "ActivationBundle",
    "FormatError",
    "GroupLayout",
    "InputError",
    "LayoutError",
    "MetricReport",
    "NumericError",
    "ParamVector",
    "PlanMergeError",
    "Planner",
    "PlannerConfig",
    "Scene",
    "SpecError",
    "StateError",
    "TrainingError",
    "ade",
    "collision_rate",
    "compose",
    "evaluate",
    "fde",
    "miss_rate",
    "task_vector",
]
