"""Desk-scale experiment protocols.

All experiments share one synthetic motion dataset (1000 clips of 17
frames at 32×32, generated with ``DATA_SEED``): the first 800 clips train,
the last 200 are held out. Model seeds vary per run. Frame prediction uses
the frame-norm Huber loss throughout.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, SyntheticSpec, gen_synthetic
from .evaluation import evaluate, evaluate_predictor, identity_predictor, single_frame_baseline
from .model import NetworkConfig
from .trainer import TrainConfig, pretrain, train_joint

DATA_SEED = 7
NUM_TRAIN, NUM_TEST = 800, 200
LABEL_FRACTION = 0.1

# frame-prediction pretraining: the prediction loss is small in absolute
# terms (alpha = 0.1, delta = 0.01), so the step size is large
PRETRAIN = TrainConfig(lr=10.0, epochs=6, huber_mode="frame-norm", alpha=0.1, mode="pretrain")
JOINT = TrainConfig(lr=0.1, epochs=3, huber_mode="frame-norm", alpha=0.1, beta=1.0)
# limited-label runs: 10 epochs in total over the labelled subset
LOW_LABEL = TrainConfig(lr=0.1, epochs=10, huber_mode="frame-norm", alpha=0.1, beta=1.0)
FINETUNE_PRETRAIN_EPOCHS = 2


def default_threads() -> int:
    return max(1, os.cpu_count() or 1)


def standard_data(num_train: int = NUM_TRAIN, num_test: int = NUM_TEST,
                  seed: int = DATA_SEED) -> tuple[Dataset, Dataset]:
    ds = gen_synthetic(SyntheticSpec(num_clips=num_train + num_test), seed=seed)
    return ds.split(num_train)


def labelled_subset(train: Dataset, fraction: float = LABEL_FRACTION) -> Dataset:
    """The first ``fraction`` of the training clips (classes stay balanced)."""
    n = max(1, int(round(fraction * len(train))))
    return train.subset(np.arange(n))


def _net(seed: int) -> NetworkConfig:
    return NetworkConfig(seed=seed)


@dataclass
class Runs:
    """Per-seed values of one measured quantity and their median."""
    values: dict = field(default_factory=dict)

    @property
    def median(self) -> float:
        return float(np.median(list(self.values.values())))


def frame_prediction(seeds, train: Dataset, test: Dataset, cfg: TrainConfig = PRETRAIN,
                     threads: int | None = None) -> tuple[Runs, float]:
    """Pretrain on the prediction loss alone; held-out SSIM per seed and the
    identity-filter (copy the last frame) SSIM on the same clips."""
    threads = default_threads() if threads is None else threads
    runs = Runs()
    for s in seeds:
        res = pretrain(train, _net(s), replace(cfg, seed=s, threads=threads))
        runs.values[s] = evaluate(res.params, _net(s), test, threads=threads).mean_ssim
    baseline = evaluate_predictor(identity_predictor(train.num_classes), test, threads=threads).mean_ssim
    return runs, baseline


def classification(seeds, train: Dataset, test: Dataset, cfg: TrainConfig = JOINT,
                   threads: int | None = None, init=None) -> Runs:
    """Train with ``cfg`` (joint or cls-only) and report held-out accuracy.

    ``init`` optionally maps a seed to starting parameters.
    """
    threads = default_threads() if threads is None else threads
    runs = Runs()
    for s in seeds:
        params = None if init is None else init(s)
        res = train_joint(train, _net(s), replace(cfg, seed=s, threads=threads), params=params)
        runs.values[s] = evaluate(res.params, _net(s), test, threads=threads).accuracy
    return runs


def single_frame_accuracy(train: Dataset, test: Dataset) -> float:
    return single_frame_baseline(train, test)


def ablation(seeds, train: Dataset, test: Dataset, cfg: TrainConfig = LOW_LABEL,
             threads: int | None = None) -> tuple[Runs, Runs]:
    """Held-out accuracy with (alpha as configured) and without the prediction loss,
    identical budgets, on the labelled subset."""
    labelled = labelled_subset(train)
    joint = classification(seeds, labelled, test, replace(cfg, mode="joint"), threads)
    cls_only = classification(seeds, labelled, test, replace(cfg, mode="cls-only"), threads)
    return joint, cls_only


def pretrain_then_finetune(seeds, train: Dataset, test: Dataset, cfg: TrainConfig = LOW_LABEL,
                           pretrain_cfg: TrainConfig = PRETRAIN,
                           pretrain_epochs: int = FINETUNE_PRETRAIN_EPOCHS,
                           threads: int | None = None) -> Runs:
    """Prediction-only pretraining on every training clip (labels unused), then
    joint fine-tuning on the labelled subset. The two stages together use
    ``cfg.epochs`` epochs, the same count as training from scratch."""
    if not 0 < pretrain_epochs < cfg.epochs:
        raise ValueError("pretrain_epochs must leave at least one fine-tuning epoch")
    threads = default_threads() if threads is None else threads
    pcfg = replace(pretrain_cfg, epochs=pretrain_epochs, threads=threads)

    def init(s):
        return pretrain(train, _net(s), replace(pcfg, seed=s)).params

    return classification(seeds, labelled_subset(train), test,
                          replace(cfg, epochs=cfg.epochs - pretrain_epochs), threads, init=init)
