"""Trajectory recovery with group-tendency embeddings and conditional diffusion."""
from .core import Dataset, Grid, MaskSet, Trajectory
from .errors import FormatError, InputError, TrainingDiverged
from .evaluation import RecoveryCase, RecoveryOutput, cases_from_dataset
from .model import TrajectoryRecoverer

__version__ = "0.1.0"
