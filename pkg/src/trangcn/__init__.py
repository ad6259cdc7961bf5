"""Pose, convolutional and transformer re-identification branches fused by a graph module."""
from .config import ArchConfig, TrainConfig
from .core import ParamStore, grad_check, init_params, load_checkpoint, save_checkpoint
from .data import Dataset, DatasetSplit, generate_synthetic, load_dataset_dir, load_market_dir
from .errors import (ConfigError, ContractError, DivergenceError, IngestionError, NumericError, ShapeError,
                     TranGCNError)
from .metrics import MetricsReport, RetrievalRun, cmc_at_k, evaluate, mean_average_precision
from .model import TranGCN, build_model
from .training import TrainLog, train_stagewise

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "TrainConfig", "ParamStore", "grad_check", "init_params", "load_checkpoint", "save_checkpoint",
    "Dataset", "DatasetSplit", "generate_synthetic", "load_dataset_dir", "load_market_dir",
    "ConfigError", "ContractError", "DivergenceError", "IngestionError", "NumericError", "ShapeError",
    "TranGCNError", "MetricsReport", "RetrievalRun", "cmc_at_k", "evaluate", "mean_average_precision",
    "TranGCN", "build_model", "TrainLog", "train_stagewise",
]
