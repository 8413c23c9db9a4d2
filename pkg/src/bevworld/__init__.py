"""bevworld: a desk-scale driving world model.

Synthetic multi-camera scenes are lifted into a bird's-eye-view token grid,
fed through a small causal transformer that answers templated questions, and
propagated to future frames whose geometry is supervised by a differentiable
signed-distance renderer against simulated range scans.
"""

from .config import ConfigError, RunConfig
from .dataset_io import (CorruptDatasetError, DrivingDataset, VersionError,
                         build_dataset, load_dataset, save_dataset)
from .metrics import EvalReport, chamfer, default_roi, roi_filter, rouge_l
from .model import WorldModel
from .training import Trainer, evaluate_checkpoint
from .vocab import Vocab

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "RunConfig", "CorruptDatasetError", "DrivingDataset",
    "VersionError", "build_dataset", "load_dataset", "save_dataset",
    "EvalReport", "chamfer", "default_roi", "roi_filter", "rouge_l",
    "WorldModel", "Trainer", "evaluate_checkpoint", "Vocab", "__version__",
]
