"""Speed-rewarded GRPO for a toy conditional masked-token grid generator."""

from __future__ import annotations

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .conditions import ConditionRef, TaskSpec
from .errors import ConfigError, DivergenceError, FormatError, InputError, SpeedRLError, UsageError
from .grpo import TrainConfig
from .net import NetConfig, PolicyParams, init_params
from .sampler import SampleConfig

__version__ = "0.1.0"

__all__ = [
    "ConditionRef", "ConfigError", "DivergenceError", "ExperimentConfig", "FormatError", "InputError",
    "NetConfig", "PolicyParams", "SampleConfig", "SpeedRLError", "TaskSpec", "TrainConfig", "UsageError",
    "init_params", "load_checkpoint", "load_config", "save_checkpoint",
]
