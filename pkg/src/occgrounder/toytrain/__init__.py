"""Synthetic scenes and a desk-scale training loop."""

from .scene import Box, SyntheticScene, default_scene_space, default_scene_spec, intersect_scene, make_rig, make_synthetic_scene, phrase_embedding
from .train import (
    TOY_SPACE,
    TRACE_COLUMNS,
    Paradigm,
    StepResult,
    ToyModel,
    ToyProblem,
    TrainConfig,
    evaluate_losses,
    load_noise_words,
    make_toy_problem,
    trace_csv,
    train,
    train_miou,
)

__all__ = [
    "Box",
    "Paradigm",
    "StepResult",
    "SyntheticScene",
    "TOY_SPACE",
    "TRACE_COLUMNS",
    "ToyModel",
    "ToyProblem",
    "TrainConfig",
    "default_scene_space",
    "default_scene_spec",
    "evaluate_losses",
    "intersect_scene",
    "load_noise_words",
    "make_rig",
    "make_synthetic_scene",
    "make_toy_problem",
    "phrase_embedding",
    "trace_csv",
    "train",
    "train_miou",
]
