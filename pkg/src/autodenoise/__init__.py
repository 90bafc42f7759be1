"""Reinforcement-learned instance denoising for CTR prediction models."""

from .config import RunConfig
from .data import DatasetSplit, FieldSchema, Instances, inject_label_noise, load_csv, split_dataset, synth_generate
from .engine import DenoiseConfig, LossMatrix, compute_reward, overall_loop, validation_run, warmup_train
from .metrics import auc, evaluate, logloss
from .models import DeepFMLite, CtrModel, build_model, train_to_convergence
from .policy import PolicyNet, topk_select

__version__ = "0.1.0"

__all__ = [
    "CtrModel",
    "DatasetSplit",
    "DeepFMLite",
    "DenoiseConfig",
    "FieldSchema",
    "Instances",
    "LossMatrix",
    "PolicyNet",
    "RunConfig",
    "auc",
    "build_model",
    "compute_reward",
    "evaluate",
    "inject_label_noise",
    "load_csv",
    "logloss",
    "overall_loop",
    "split_dataset",
    "synth_generate",
    "topk_select",
    "train_to_convergence",
    "validation_run",
    "warmup_train",
]
