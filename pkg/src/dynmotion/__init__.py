"""Self-supervised dynamic motion filters for video classification, in plain numpy."""
from .data import Dataset, SyntheticSpec, gen_synthetic, load_dataset, save_dataset
from .dynfilter import DynamicFilterBank, apply_filters, make_filters
from .evaluation import MetricsReport, evaluate
from .losses import LossConfig, cross_entropy, huber_fp, total_loss
from .model import NetworkConfig, forward, init_params, load_model, save_model
from .trainer import TrainConfig, pretrain, train_joint

__all__ = [
    "Dataset", "SyntheticSpec", "gen_synthetic", "load_dataset", "save_dataset",
    "DynamicFilterBank", "apply_filters", "make_filters",
    "MetricsReport", "evaluate",
    "LossConfig", "cross_entropy", "huber_fp", "total_loss",
    "NetworkConfig", "forward", "init_params", "load_model", "save_model",
    "TrainConfig", "pretrain", "train_joint",
]
