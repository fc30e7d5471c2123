"""Multi-view action recognition with divided same-view / different-view attention."""
from .data import SceneConfig, generate_dataset, load_dataset, save_dataset, split_dataset
from .model import Combination, Mode, ModelConfig, MVAFormer, load_model, save_model
from .train import TrainConfig, evaluate, run_baselines, train

__version__ = "0.1.0"

__all__ = [
    "Combination", "Mode", "ModelConfig", "MVAFormer", "SceneConfig", "TrainConfig",
    "evaluate", "generate_dataset", "load_dataset", "load_model", "run_baselines",
    "save_dataset", "save_model", "split_dataset", "train",
]
