"""Adversarial-sample transferability between full-precision and compressed networks."""

from .attacks import AdversarialBatch, AttackConfig, AuditLog, generate
from .compression import FixedPointFormat, PruneConfig, density, prune, quantise_model
from .data import LabeledDataset, load_idx, load_mnist
from .model import Architecture, Checkpoint, forward, init_checkpoint, lenet5, load, predict, save
from .trainer import TrainConfig, evaluate, train
from .transfer import Scenario, ScenarioReport, cdf, preferred_density, run_scenario, sweep

__all__ = [
    "AdversarialBatch",
    "AttackConfig",
    "AuditLog",
    "generate",
    "FixedPointFormat",
    "PruneConfig",
    "density",
    "prune",
    "quantise_model",
    "LabeledDataset",
    "load_idx",
    "load_mnist",
    "Architecture",
    "Checkpoint",
    "forward",
    "init_checkpoint",
    "lenet5",
    "load",
    "predict",
    "save",
    "TrainConfig",
    "evaluate",
    "train",
    "Scenario",
    "ScenarioReport",
    "cdf",
    "preferred_density",
    "run_scenario",
    "sweep",
]
