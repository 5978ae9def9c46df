"""Pre-trained model averaging: checkpoint merging along a single training trajectory."""

from .merging import MergeStrategy, WeightVector, compute_weights, ema_update, merge
from .planner import MergePlan, plan, recommend_interval
from .store import TrajectoryManifest, load_tensor, read_container, write_container

__version__ = "0.1.0"

__all__ = [
    "MergePlan",
    "MergeStrategy",
    "TrajectoryManifest",
    "WeightVector",
    "compute_weights",
    "ema_update",
    "load_tensor",
    "merge",
    "plan",
    "read_container",
    "recommend_interval",
    "write_container",
]
