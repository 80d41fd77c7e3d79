"""
Ambient Align
Cross-modal alignment of exocentric video and ambient sensor streams: spatial
encoders trained by online clustering, then temporal encoders trained with a
spatially-conditioned weighted contrastive loss.
"""

__version__ = "0.1.0"

from .config import RunConfig, load_config
from .synthdata import Scenario, Dataset, build_dataset, load_dataset, save_dataset
from .encoders import build_encoders
from .stage1 import run_stage1
from .stage2 import run_stage2, weighted_infonce
from .evaluation import train_linear_probe, weighted_f1, mean_average_precision

__all__ = [
    "RunConfig", "load_config",
    "Scenario", "Dataset", "build_dataset", "load_dataset", "save_dataset",
    "build_encoders", "run_stage1", "run_stage2", "weighted_infonce",
    "train_linear_probe", "weighted_f1", "mean_average_precision",
]
