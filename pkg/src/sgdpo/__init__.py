"""Desk-scale laboratory for DPO and sub-sequence pilot (SGDPO) preference
optimisation: closed-form gradient calculus, a small numpy autodiff engine,
a tiny causal transformer policy, trainers and gradient-flow simulation."""

from .core_math import DEFAULT_BETA
from .losses import dpo_loss, sgdpo_loss
from .trainer import Method, TrainConfig, po_train, sft_train

__all__ = ["DEFAULT_BETA", "Method", "TrainConfig", "dpo_loss", "po_train", "sft_train", "sgdpo_loss"]
__version__ = "0.1.0"
