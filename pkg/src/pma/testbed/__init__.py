"""Desk-scale training substrate that produces real checkpoint trajectories."""

from .schedule import WsdSchedule, lr_at
from .toy import DataConfig, ModelConfig
from .trainer import (
    InitConfig,
    SpikeConfig,
    TrainConfig,
    TrainingDiverged,
    detect_spike,
    fork,
    pma_init_resume,
    train,
)

__all__ = [
    "DataConfig",
    "InitConfig",
    "ModelConfig",
    "SpikeConfig",
    "TrainConfig",
    "TrainingDiverged",
    "WsdSchedule",
    "detect_spike",
    "fork",
    "lr_at",
    "pma_init_resume",
    "train",
]
