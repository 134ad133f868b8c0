"""Class-incremental learning with rehearsal, margin dampening and gated heads."""

from .errors import ConfigError, ContistreamError, ContractError, DimensionError, DomainError, FormatError, NumericError
from .estimator import ContinualClassifier
from .losses import LossConfig, compose_md_loss, current_task_ce, kl_regularizer, margin_value, md_loss
from .memory import RehearsalMemory
from .metrics import acc, bwt, forgetting, head_count, overhead, time_heads
from .models import ContinualModel, read_checkpoint, write_checkpoint
from .scenario import Dataset, Scenario, build_scenario, generate_synthetic, load_idx
from .strategies import STRATEGIES, ContinualLearner, RunRecord, TrainConfig, train_strategy

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContistreamError",
    "ContinualClassifier",
    "ContinualLearner",
    "ContinualModel",
    "ContractError",
    "Dataset",
    "DimensionError",
    "DomainError",
    "FormatError",
    "LossConfig",
    "NumericError",
    "RehearsalMemory",
    "RunRecord",
    "STRATEGIES",
    "Scenario",
    "TrainConfig",
    "acc",
    "build_scenario",
    "bwt",
    "compose_md_loss",
    "current_task_ce",
    "forgetting",
    "generate_synthetic",
    "head_count",
    "kl_regularizer",
    "load_idx",
    "margin_value",
    "md_loss",
    "overhead",
    "read_checkpoint",
    "time_heads",
    "train_strategy",
    "write_checkpoint",
]
