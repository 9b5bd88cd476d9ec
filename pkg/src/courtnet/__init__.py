"""Three-network infrared small-target detector on a numpy autograd core."""
from .config import ConfigError, RunConfig, load_run_config
from .data import ProbeSpec, Sample, SceneSpec, generate_probe_set, generate_random_scenes, load_dataset
from .models import CourtNet, detect, fuse, fusion_weights
from .tensor import ShapeError, Tape, TapeError, Tensor, no_grad
from .training import TrainState, evaluate, fit, load_checkpoint, save_checkpoint, train_epoch

__all__ = [
    "ConfigError",
    "CourtNet",
    "ProbeSpec",
    "RunConfig",
    "Sample",
    "SceneSpec",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "TrainState",
    "detect",
    "evaluate",
    "fit",
    "fuse",
    "fusion_weights",
    "generate_probe_set",
    "generate_random_scenes",
    "load_checkpoint",
    "load_dataset",
    "load_run_config",
    "no_grad",
    "save_checkpoint",
    "train_epoch",
]
