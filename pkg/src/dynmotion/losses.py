"""Frame-prediction Huber loss, softmax cross-entropy and their weighted sum."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, as_tensor, record, scale

HUBER_MODES = ("per-pixel", "frame-norm")


@dataclass(frozen=True)
class LossConfig:
    """Loss weights and Huber threshold.

    ``huber_mode="per-pixel"`` averages the elementwise Huber penalty.
    ``"frame-norm"`` branches once per frame on the L1 norm of the whole
    residual frame and averages the per-frame values.
    """

    delta: float = 0.01
    alpha: float = 0.1
    beta: float = 1.0
    huber_mode: str = "per-pixel"

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be > 0")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be >= 0")
        if self.huber_mode not in HUBER_MODES:
            raise ValueError(f"huber_mode must be one of {HUBER_MODES}")


def huber_fp(pred: Tensor, target, cfg: LossConfig = LossConfig()) -> Tensor:
    target = as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"huber_fp: shape mismatch {pred.shape} vs {target.shape}")
    r = pred.data - target.data
    d = r.dtype.type(cfg.delta)
    half = r.dtype.type(0.5)
    if cfg.huber_mode == "per-pixel":
        a = np.abs(r)
        quad = a < d
        vals = np.where(quad, half * r * r, d * a - half * d * d)
        n = r.dtype.type(r.size)
        out = vals.mean()
        dr = np.where(quad, r, d * np.sign(r)) / n
    else:
        if r.ndim < 2:
            raise ValueError("frame-norm mode needs a leading frame axis")
        flat = r.reshape(r.shape[0], -1)
        l1 = np.abs(flat).sum(axis=1)
        quad = l1 < d
        per_frame = np.where(quad, half * (flat * flat).sum(axis=1), d * l1 - half * d * d)
        out = per_frame.mean()
        nf = r.dtype.type(flat.shape[0])
        dflat = np.where(quad[:, None], flat, d * np.sign(flat)) / nf
        dr = dflat.reshape(r.shape)

    def backward(g):
        return g * dr, -(g * dr)

    return record("huber_fp", np.asarray(out, dtype=r.dtype), (pred, target), backward)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label] via a max-shifted log-sum-exp."""
    if logits.data.ndim != 1:
        raise ValueError(f"cross_entropy expects a 1-D logit vector, got {logits.shape}")
    K = logits.shape[0]
    label = int(label)
    if not 0 <= label < K:
        raise ValueError(f"label {label} out of range for {K} classes")
    z = logits.data - logits.data.max()
    e = np.exp(z)
    total = e.sum()
    loss = np.log(total) - z[label]
    p = e / total

    def backward(g):
        d = p.copy()
        d[label] -= 1
        return (g * d,)

    return record("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def total_loss(l_fp: Tensor, l_cls: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """alpha * l_fp + beta * l_cls."""
    for v in (l_fp, l_cls):
        if not math.isfinite(v.item()):
            raise ValueError("total_loss: component loss is not finite")
    return add(scale(l_fp, cfg.alpha), scale(l_cls, cfg.beta))
