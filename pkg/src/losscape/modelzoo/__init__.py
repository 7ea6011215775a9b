"""Model builders, datasets and the SGD trainer."""
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, load_dataset, make_synthetic, save_dataset, split_batch
from .models import (build_lenet_mini, build_mlp, build_model, build_quadratic,
                     lenet_param_count)
from .train import (OptimizerConfig, Snapshot, Trajectory, expected_snapshot_count,
                    load_trajectory, save_trajectory, train_sgd)

__all__ = [
    "Dataset", "OptimizerConfig", "Snapshot", "Trajectory", "build_lenet_mini", "build_mlp",
    "build_model", "build_quadratic", "expected_snapshot_count", "lenet_param_count",
    "load_checkpoint", "load_dataset", "load_trajectory", "make_synthetic", "save_checkpoint",
    "save_dataset", "save_trajectory", "split_batch", "train_sgd",
]
