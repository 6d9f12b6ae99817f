"""Federated adversarial prompt tuning on a toy dual encoder, in numpy."""

__version__ = "0.1.0"

from .adversary import AttackConfig, attack, cw, evaluate_robustness, pgd
from .dataset import DomainShiftSpec, SyntheticSpec, generate_dataset, pretrain_backbone, sample_shots
from .encoders import DualEncoder, EncoderConfig, FrozenWeights
from .federation import FedConfig, aggregate, client_update, lr_schedule, partition, run_training
from .promptgen import (PromptConfig, PromptedModel, beacon_aggregate, beacon_init, beacon_local,
                        generate_visual_prompts, init_trainables)
from .tensor import Tensor, finite_diff_grad, grad

__all__ = [
    "AttackConfig", "attack", "cw", "evaluate_robustness", "pgd",
    "DomainShiftSpec", "SyntheticSpec", "generate_dataset", "pretrain_backbone", "sample_shots",
    "DualEncoder", "EncoderConfig", "FrozenWeights",
    "FedConfig", "aggregate", "client_update", "lr_schedule", "partition", "run_training",
    "PromptConfig", "PromptedModel", "beacon_aggregate", "beacon_init", "beacon_local",
    "generate_visual_prompts", "init_trainables",
    "Tensor", "finite_diff_grad", "grad",
]
