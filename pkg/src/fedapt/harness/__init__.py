"""Configs, commands and ablation presets around the core library."""

from .ablate import PRESETS, preset_arms, run_preset
from .config import ExperimentConfig, load, loads
from .runs import cmd_eval, cmd_pretrain, cmd_train, evaluate_run

__all__ = ["PRESETS", "preset_arms", "run_preset", "ExperimentConfig", "load", "loads",
           "cmd_eval", "cmd_pretrain", "cmd_train", "evaluate_run"]
