"""Transferable embedding-space attacks on toy image encoders, with simulated downstream consumers."""

from .attack import AttackConfig, TargetSpec, pgd_attack, pgd_attack_batch
from .config import ExperimentConfig, dump_config, load_config
from .encoders import Encoder, init_encoder, load_weights, save_weights, train_contrastive
from .experiment import run_ablation, run_experiment, verify_determinism, write_report
from .scenarios import ScenarioSpec, run_scenario

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "Encoder",
    "ExperimentConfig",
    "ScenarioSpec",
    "TargetSpec",
    "dump_config",
    "init_encoder",
    "load_config",
    "load_weights",
    "pgd_attack",
    "pgd_attack_batch",
    "run_ablation",
    "run_experiment",
    "run_scenario",
    "save_weights",
    "train_contrastive",
    "verify_determinism",
    "write_report",
]
