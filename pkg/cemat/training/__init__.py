from cemat.training.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from cemat.training.objectives import Objective
from cemat.training.optim import Adam, lr_schedule
from cemat.training.trainer import TrainConfig, Trainer

__all__ = [
    "Adam",
    "Checkpoint",
    "Objective",
    "TrainConfig",
    "Trainer",
    "load_checkpoint",
    "lr_schedule",
    "save_checkpoint",
]
