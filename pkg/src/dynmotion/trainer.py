"""Mini-batch Nesterov SGD and the pretraining / joint training protocols."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Dataset, mix64
from .losses import LossConfig
from .model import (NetworkConfig, calibrate, decode, encode, init_params, is_buffer,
                    is_classifier_section, is_encoder_section, mean_of, normalize_batch,
                    output_losses, trainable_sections)
from .tensor import Graph, Tensor, backward, mul, sum_all

log = logging.getLogger(__name__)

MODES = ("pretrain", "joint", "cls-only")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 10
    alpha: float = 0.1
    beta: float = 1.0
    delta: float = 0.01
    huber_mode: str = "per-pixel"
    mode: str = "joint"
    seed: int = 0
    milestones: tuple = (0.5, 0.75)
    threads: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def loss_config(self) -> LossConfig:
        alpha = 0.0 if self.mode == "cls-only" else self.alpha
        beta = 0.0 if self.mode == "pretrain" else self.beta
        return LossConfig(delta=self.delta, alpha=alpha, beta=beta, huber_mode=self.huber_mode)


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float,
             momentum: float = 0.9, weight_decay: float = 0.0) -> dict:
    """In-place Nesterov update of every section present in ``grads``.

    g' = g + wd * w;  v <- mu * v + g';  w <- w - lr * (g' + mu * v)
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
        w = params[name]
        dt = w.dtype.type
        g2 = g + dt(weight_decay) * w
        v = velocity.get(name)
        v = g2 if v is None else dt(momentum) * v + g2
        velocity[name] = v
        params[name] = w - dt(lr) * (g2 + dt(momentum) * v)
    return params


def lr_schedule(epoch: int, base_lr: float, total_epochs: int | None = None,
                milestones=(0.5, 0.75)) -> float:
    """base_lr * 0.1 ** (number of milestones already reached).

    Milestones below 1 are fractions of ``total_epochs``; others are epochs.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    passed = 0
    for m in milestones:
        at = m * total_epochs if m < 1 and total_epochs is not None else m
        if epoch >= at:
            passed += 1
    return base_lr * 0.1 ** passed


@dataclass
class ClipResult:
    loss_fp: float
    loss_cls: float
    loss_total: float
    correct: bool


def _encode_clip(params, frames, net_cfg, sections):
    leaves = {k: Tensor(v, requires_grad=k in sections)
              for k, v in params.items() if is_encoder_section(k)}
    graph = Graph()
    with graph:
        enc = encode(leaves, np.asarray(frames)[:net_cfg.T], net_cfg)
    return leaves, graph, enc


def _encoder_backward(state, d_pooled, d_features):
    leaves, graph, enc = state
    terms = [(t, g) for t, g in ((enc.pooled, d_pooled), (enc.frame_features, d_features))
             if g is not None and t.requires_grad]
    if not terms:
        return {}
    with graph:
        s = sum_all(mul(terms[0][0], Tensor(terms[0][1])))
        for t, g in terms[1:]:
            s = s + sum_all(mul(t, Tensor(g)))
        backward(s)
    return {k: v.grad for k, v in leaves.items() if v.grad is not None}


def batch_gradients(params, ds: Dataset, idx, net_cfg: NetworkConfig, loss_cfg: LossConfig,
                    sections, pool=None):
    """Gradient of the mean training-mode loss over the clips in ``idx``.

    Per-clip encoding and its backward pass run on private tapes (in
    parallel when ``pool`` is given); the batch-normalised decoder and the
    losses share one tape. Per-clip gradients are reduced in index order.
    """
    idx = [int(i) for i in idx]
    sections = set(sections)
    run = pool.map if pool is not None else map
    states = list(run(lambda i: _encode_clip(params, ds.frames[i], net_cfg, sections), idx))

    dec = {k: Tensor(v, requires_grad=k in sections)
           for k, v in params.items() if not is_encoder_section(k) and not is_buffer(k)}
    pooled = [Tensor(st[2].pooled.data, requires_grad=True) for st in states]
    feats = [Tensor(st[2].frame_features.data, requires_grad=True) for st in states]
    with Graph():
        normed = normalize_batch(feats)
        losses = []
        for j, i in enumerate(idx):
            frames = ds.frames[i]
            out = decode(dec, frames[:net_cfg.T], pooled[j], normed[j], net_cfg)
            losses.append(output_losses(out, frames, int(ds.labels[i]), net_cfg, loss_cfg))
        batch_total = mean_of([c.total for c in losses])
        backward(batch_total)

    enc_grads = list(run(lambda j: _encoder_backward(states[j], pooled[j].grad, feats[j].grad),
                         range(len(idx))))
    grads = {}
    for k in params:
        if k not in sections:
            continue
        if is_encoder_section(k):
            total = None
            for g in enc_grads:
                if k in g:
                    total = g[k].copy() if total is None else total + g[k]
        else:
            total = dec[k].grad
        grads[k] = np.zeros_like(params[k]) if total is None else total
    results = [ClipResult(c.fp.item(), c.cls.item(), c.total.item(),
                          int(np.argmax(c.out.class_logits.data)) == int(ds.labels[i]))
               for c, i in zip(losses, idx)]
    return grads, results


@dataclass
class TrainResult:
    params: dict
    trace: list = field(default_factory=list)


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(mix64((seed * 0x9E3779B97F4A7C15 + epoch + 1) & 0xFFFFFFFFFFFFFFFF))
    return rng.permutation(n)


def fit(params: dict, ds: Dataset, net_cfg: NetworkConfig, cfg: TrainConfig,
        sections=None, trace_path=None) -> TrainResult:
    """Shared optimisation loop; ``sections`` defaults to every trainable section.

    The normalisation buffers are re-estimated on ``ds`` after the last epoch.
    """
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    if ds.num_classes != net_cfg.num_classes:
        raise ValueError(f"dataset has {ds.num_classes} classes, network expects {net_cfg.num_classes}")
    params = {k: np.array(v, copy=True) for k, v in params.items()}
    sections = tuple(trainable_sections(params)) if sections is None else tuple(sections)
    bad = [k for k in sections if is_buffer(k)]
    if bad:
        raise ValueError(f"buffers are not trainable: {bad}")
    loss_cfg = cfg.loss_config()
    velocity: dict = {}
    trace = []
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    fh = open(trace_path, "w") if trace_path is not None else None
    try:
        for epoch in range(cfg.epochs):
            lr = lr_schedule(epoch, cfg.lr, cfg.epochs, cfg.milestones)
            order = _epoch_order(cfg.seed, epoch, len(ds))
            sums = np.zeros(3)
            correct = 0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                grads, results = batch_gradients(params, ds, idx, net_cfg, loss_cfg, sections, pool)
                if epoch == 0 and start == 0:
                    log.info("first batch loss_fp %r loss_cls %r",
                             float(np.mean([r.loss_fp for r in results])),
                             float(np.mean([r.loss_cls for r in results])))
                for r in results:
                    sums += (r.loss_fp, r.loss_cls, r.loss_total)
                    correct += r.correct
                sgd_step(params, grads, velocity, lr, cfg.momentum, cfg.weight_decay)
            row = {"epoch": epoch, "lr": lr, "loss_fp": sums[0] / len(ds),
                   "loss_cls": sums[1] / len(ds), "loss_total": sums[2] / len(ds),
                   "train_acc": correct / len(ds)}
            trace.append(row)
            log.info("epoch %d lr %.3g fp %.5g cls %.4f acc %.3f", epoch, lr,
                     row["loss_fp"], row["loss_cls"], row["train_acc"])
            if fh is not None:
                fh.write(json.dumps(row) + "\n")
                fh.flush()
        if cfg.epochs > 0:
            params = calibrate(params, ds.frames, net_cfg)
    finally:
        if pool is not None:
            pool.shutdown()
        if fh is not None:
            fh.close()
    return TrainResult(params, trace)


def pretrain(ds: Dataset, net_cfg: NetworkConfig, cfg: TrainConfig, params=None,
             trace_path=None) -> TrainResult:
    """Frame-prediction-only training; classifier sections are never touched."""
    cfg = replace(cfg, mode="pretrain")
    params = init_params(net_cfg) if params is None else params
    sections = [k for k in trainable_sections(params) if not is_classifier_section(k)]
    return fit(params, ds, net_cfg, cfg, sections, trace_path)


def train_joint(ds: Dataset, net_cfg: NetworkConfig, cfg: TrainConfig, params=None,
                trace_path=None) -> TrainResult:
    """alpha * L_FP + beta * L_cls end to end ("cls-only" forces alpha = 0)."""
    if cfg.mode == "pretrain":
        raise ValueError("use pretrain() for mode='pretrain'")
    params = init_params(net_cfg) if params is None else params
    return fit(params, ds, net_cfg, cfg, None, trace_path)
