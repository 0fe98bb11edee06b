# Copyright 2025 Zenshiro
# Licensed under the Apache License, Version 2.0

"""
FADE simulator - federated adversarial decoupled learning.

Heterogeneous clients adversarially train disjoint modules of a shared
network under a FedAvg-style protocol; an analysis suite measures natural
and adversarial accuracy, feature perturbations and the robustness and
consistency diagnostics of the auxiliary heads.
"""

__version__ = "1.0.0"
__author__ = "Zenshiro"

from .adversary import AttackConfig, pgd, project
from .config import ExperimentConfig, TrainConfig, load_config
from .engine import aggregate, local_train, plan_round, run
from .model import FadeModel, Partition, build

__all__ = [
    "AttackConfig",
    "ExperimentConfig",
    "FadeModel",
    "Partition",
    "TrainConfig",
    "aggregate",
    "build",
    "load_config",
    "local_train",
    "pgd",
    "plan_round",
    "project",
    "run",
]
