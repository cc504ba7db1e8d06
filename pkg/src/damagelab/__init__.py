"""Cross-region building-damage segmentation with prototype consistency and
damage-aware patch triplets, built on a small numpy autodiff core."""
from __future__ import annotations

__version__ = "0.1.0"

from .dataset import Dataset, RegionSpec, TileRecord, default_regions, generate_dataset, load_dataset, save_dataset
from .encoder import Encoder, PatchGeometry
from .harness import ExperimentConfig, ExperimentReport, run_experiment
from .metrics import MetricsReport, pixel_metrics
from .trainer import FewShotConfig, Model, TrainConfig, few_shot_finetune, train_fold

__all__ = [
    "Dataset",
    "Encoder",
    "ExperimentConfig",
    "ExperimentReport",
    "FewShotConfig",
    "MetricsReport",
    "Model",
    "PatchGeometry",
    "RegionSpec",
    "TileRecord",
    "TrainConfig",
    "__version__",
    "default_regions",
    "few_shot_finetune",
    "generate_dataset",
    "load_dataset",
    "pixel_metrics",
    "run_experiment",
    "save_dataset",
    "train_fold",
]
