"""Scheduling temporally correlated auxiliary tasks with a learned policy.

Subpackages are imported lazily by users; the most common entry points are
re-exported here.
"""

from .tasks import TaskSet, TaskSpec, make_synthetic_series, make_synthetic_transduction
from .trainer import TrainConfig, evaluate, train

__all__ = [
    "TaskSet", "TaskSpec", "TrainConfig", "evaluate", "make_synthetic_series",
    "make_synthetic_transduction", "train",
]
__version__ = "0.1.0"
