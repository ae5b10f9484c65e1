"""Synthetic multi-domain data, toy backbone, training, evaluation and the command line."""

from .config import TrainConfig
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .train import evaluate, train, run
