"""Experiment harness: configuration, training loop, protocols, CLI."""

from xego.harness.config import ConfigError, RunConfig, load_config
from xego.harness.training import (
    TrainingDivergedError,
    TrainResult,
    evaluate_split,
    prepare_bundle,
    train,
)
from xego.harness.experiments import (
    analyze_embeddings,
    run_ablation,
    run_pair,
    sweep_pov,
)

__all__ = [
    "ConfigError",
    "RunConfig",
    "load_config",
    "TrainingDivergedError",
    "TrainResult",
    "prepare_bundle",
    "train",
    "evaluate_split",
    "run_pair",
    "sweep_pov",
    "run_ablation",
    "analyze_embeddings",
]
