"""Synthetic-task training with manual gradients and periodic reclustering."""

from .loop import ConfigError, ObjectiveReport, TrainConfig, TrainResult, objective_report, train
from .model import MoEModel, ModelError, backward, forward, forward_batch, loss_and_grads, mse
from .optim import AdamState, adamw_step, clip_gradients, global_norm, temperature_at
from .task import SyntheticTask, make_task

__all__ = [
    "AdamState",
    "ConfigError",
    "ModelError",
    "MoEModel",
    "ObjectiveReport",
    "SyntheticTask",
    "TrainConfig",
    "TrainResult",
    "adamw_step",
    "backward",
    "clip_gradients",
    "forward",
    "forward_batch",
    "global_norm",
    "loss_and_grads",
    "make_task",
    "mse",
    "objective_report",
    "temperature_at",
    "train",
]
