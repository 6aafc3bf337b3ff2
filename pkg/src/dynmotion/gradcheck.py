"""Finite-difference checks for every differentiable operation.

Each check builds a scalar from one op (a fixed random weighting of its
output), compares backprop against central differences in 64-bit and
returns the relative error reported by :func:`tensor.grad_check`.
Inputs are drawn away from the non-differentiable points (relu at 0,
|r| at 0, Huber branch switches) so the comparison is meaningful.
"""
from __future__ import annotations

from dataclasses import replace
from typing import Callable

import numpy as np

from . import tensor as tn
from .data import clip_stream
from .dynfilter import DynamicFilterBank, apply_filters, make_filters
from .losses import LossConfig, cross_entropy, huber_fp, total_loss
from .model import (NetworkConfig, batch_losses, clip_losses, init_params,
                    trainable_sections)
from .tensor import CHECK_DTYPE, Tensor, grad_check

TOLERANCE = 1e-6
EPS = 1e-6

# network used by the end-to-end check
COMPOSITE_NET = NetworkConfig(T=4, H=8, W=8, s=3, dmr_dim=6, ar_dim=3,
                              trunk_channels=(2, 3), num_classes=3)


def _rng(seed: int, salt: int) -> np.random.Generator:
    return np.random.default_rng(clip_stream(seed, salt).next_u64())


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return tn.sum_all(tn.mul(out, Tensor(w)))


def _away(rng, shape, lo=-1.0, hi=1.0, avoid=(0.0,), margin=0.05):
    """Uniform sample with every value at least ``margin`` from ``avoid``."""
    x = rng.uniform(lo, hi, size=shape)
    for k in avoid:
        close = np.abs(x - k) < margin
        x[close] = k + np.where(x[close] >= k, margin, -margin) * 2
    return x


def _unary(op, w):
    return lambda t: _weighted(op(t), w)


def _check_binary(op, a, b, w) -> float:
    ea = grad_check(lambda t: _weighted(op(t, Tensor(b)), w), a, EPS)
    eb = grad_check(lambda t: _weighted(op(Tensor(a), t), w), b, EPS)
    return max(ea, eb)


def check_elementwise(seed: int) -> float:
    rng = _rng(seed, 1)
    shape = (3, 4)
    a, b = _away(rng, shape), _away(rng, shape)
    w = rng.normal(size=shape)
    errs = [_check_binary(tn.add, a, b, w), _check_binary(tn.sub, a, b, w),
            _check_binary(tn.mul, a, b, w),
            grad_check(_unary(lambda t: tn.scale(t, 1.7), w), a, EPS),
            grad_check(_unary(tn.negate, w), a, EPS),
            grad_check(_unary(tn.relu, w), a, EPS)]
    return max(errs)


def check_matmul(seed: int) -> float:
    rng = _rng(seed, 2)
    a, b = rng.normal(size=(3, 5)), rng.normal(size=(5, 2))
    w = rng.normal(size=(3, 2))
    return _check_binary(tn.matmul, a, b, w)


def check_linear(seed: int) -> float:
    rng = _rng(seed, 3)
    x, W, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3)), rng.normal(size=3)
    w = rng.normal(size=(4, 3))
    errs = [grad_check(lambda t: _weighted(tn.linear(t, Tensor(W), Tensor(b)), w), x, EPS),
            grad_check(lambda t: _weighted(tn.linear(Tensor(x), t, Tensor(b)), w), W, EPS),
            grad_check(lambda t: _weighted(tn.linear(Tensor(x), Tensor(W), t), w), b, EPS)]
    return max(errs)


def check_conv3d(seed: int) -> float:
    rng = _rng(seed, 4)
    x = rng.normal(size=(2, 4, 6, 5))
    k = rng.normal(size=(3, 2, 3, 3, 3)) * 0.3
    b = rng.normal(size=3)
    errs = []
    for stride in (1, 2):
        out_shape = tn.conv3d(Tensor(x), Tensor(k), Tensor(b), spatial_stride=stride).shape
        w = rng.normal(size=out_shape)
        errs.append(grad_check(lambda t: _weighted(
            tn.conv3d(t, Tensor(k), Tensor(b), spatial_stride=stride), w), x, EPS))
        errs.append(grad_check(lambda t: _weighted(
            tn.conv3d(Tensor(x), t, Tensor(b), spatial_stride=stride), w), k, EPS))
        errs.append(grad_check(lambda t: _weighted(
            tn.conv3d(Tensor(x), Tensor(k), t, spatial_stride=stride), w), b, EPS))
    return max(errs)


def check_softmax(seed: int) -> float:
    rng = _rng(seed, 5)
    z = rng.normal(size=(3, 6)) * 2
    w = rng.normal(size=(3, 6))
    return max(grad_check(_unary(lambda t: tn.softmax(t, axis=ax), w), z, EPS) for ax in (0, 1))


def check_normalisation(seed: int) -> float:
    rng = _rng(seed, 6)
    x = rng.normal(size=(6, 4))
    w = rng.normal(size=(6, 4))
    shift, scale = rng.normal(size=4), rng.uniform(0.5, 2, size=4)
    errs = [grad_check(_unary(lambda t: tn.standardize(t, axis=ax), w), x, EPS) for ax in (0, 1)]
    errs.append(grad_check(_unary(lambda t: tn.shift_scale(t, shift, scale), w), x, EPS))
    return max(errs)


def check_shape_ops(seed: int) -> float:
    rng = _rng(seed, 7)
    x = rng.normal(size=(4, 3, 2))
    errs = [
        grad_check(_unary(lambda t: tn.reshape(t, (6, 4)), rng.normal(size=(6, 4))), x, EPS),
        grad_check(_unary(lambda t: tn.transpose(t, (2, 0, 1)), rng.normal(size=(2, 4, 3))), x, EPS),
        grad_check(_unary(lambda t: tn.mean(t, axis=(1, 2)), rng.normal(size=4)), x, EPS),
        grad_check(_unary(lambda t: tn.rows(t, 1, 3), rng.normal(size=(2, 3, 2))), x, EPS),
        grad_check(_unary(lambda t: tn.concat([t, t], axis=1), rng.normal(size=(4, 6, 2))), x, EPS),
        grad_check(tn.sum_all, x, EPS),
    ]
    return max(errs)


def check_make_filters(seed: int) -> float:
    rng = _rng(seed, 8)
    z = rng.normal(size=(3, 9))
    w = rng.normal(size=(3, 3, 3))
    return grad_check(lambda t: _weighted(make_filters(t).filters, w), z, EPS)


def check_apply_filters(seed: int) -> float:
    rng = _rng(seed, 9)
    T, H, W, s = 3, 5, 6, 3
    clip = rng.uniform(size=(T, H, W))
    f = rng.uniform(0.1, 1, size=(T, s, s))
    f /= f.sum(axis=(1, 2), keepdims=True)
    w = rng.normal(size=(T, H, W))
    e_f = grad_check(lambda t: _weighted(apply_filters(Tensor(clip), DynamicFilterBank(t)), w), f, EPS)
    e_x = grad_check(lambda t: _weighted(apply_filters(t, DynamicFilterBank(Tensor(f))), w), clip, EPS)
    z = rng.normal(size=(T, s * s))
    e_z = grad_check(lambda t: _weighted(apply_filters(Tensor(clip), make_filters(t)), w), z, EPS)
    return max(e_f, e_x, e_z)


def _huber_check(seed: int, mode: str, salt: int) -> float:
    rng = _rng(seed, salt)
    cfg = LossConfig(huber_mode=mode)
    d = cfg.delta
    shape = (3, 4, 5)
    if mode == "per-pixel":
        # residuals on both branches, kept clear of |r| = delta
        r = _away(rng, shape, -4 * d, 4 * d, avoid=(-d, d), margin=d / 10)
    else:
        # one frame on the quadratic branch (L1 < delta), the rest linear
        r = _away(rng, shape, -0.5, 0.5, avoid=(0.0,), margin=0.02)
        r[0] = _away(rng, shape[1:], -1, 1, avoid=(0.0,), margin=0.05) * (d / (2 * np.prod(shape[1:])))
    target = rng.uniform(size=shape)
    pred = target + r
    e_p = grad_check(lambda t: huber_fp(t, Tensor(target), cfg), pred, EPS)
    e_t = grad_check(lambda t: huber_fp(Tensor(pred), t, cfg), target, EPS)
    return max(e_p, e_t)


def check_huber_per_pixel(seed: int) -> float:
    return _huber_check(seed, "per-pixel", 10)


def check_huber_frame_norm(seed: int) -> float:
    return _huber_check(seed, "frame-norm", 11)


def check_cross_entropy(seed: int) -> float:
    rng = _rng(seed, 12)
    z = rng.normal(size=5) * 2
    label = int(rng.integers(5))
    return grad_check(lambda t: cross_entropy(t, label), z, EPS)


def _composite_inputs(seed: int):
    rng = _rng(seed, 13)
    net = COMPOSITE_NET
    params = init_params(replace(net, seed=seed), dtype=CHECK_DTYPE)
    # zero biases put dead-relu regions exactly on the kink
    for name in params:
        if name.endswith(".b"):
            params[name] = _away(rng, params[name].shape, -0.2, 0.2, margin=0.02)
    params["filter.norm.mean"] = rng.normal(size=params["filter.norm.mean"].shape) * 0.1
    params["filter.norm.var"] = rng.uniform(0.5, 2, size=params["filter.norm.var"].shape)
    clips = [rng.uniform(size=(net.T + 1, net.H, net.W)) for _ in range(2)]
    labels = [int(rng.integers(net.num_classes)) for _ in clips]
    return net, params, clips, labels


def _unflatten(vec: Tensor, params: dict, names: list[str]) -> dict:
    p, start = dict(params), 0
    for name in names:
        shape = params[name].shape
        size = int(np.prod(shape))
        p[name] = tn.reshape(tn.rows(vec, start, start + size), shape)
        start += size
    return p


def check_composite(seed: int) -> float:
    """Full forward plus the weighted objective against all trainable weights.

    Covers the single-clip (stored statistics) path and the two-clip
    training path (batch statistics), with frame-norm Huber so that the
    prediction term carries real weight next to the cross-entropy. The
    error is normwise over the whole parameter vector: some sections (the
    last filter-head bias under batch statistics) have gradients that
    nearly cancel, and judging them alone would only measure round-off.
    """
    net, params, clips, labels = _composite_inputs(seed)
    cfg = LossConfig(huber_mode="frame-norm", alpha=0.1, beta=1.0)
    names = trainable_sections(params)
    flat = np.concatenate([np.asarray(params[n], dtype=CHECK_DTYPE).ravel() for n in names])

    def single(v):
        return clip_losses(_unflatten(v, params, names), clips[0], labels[0], net, cfg).total

    def batch(v):
        return batch_losses(_unflatten(v, params, names), clips, labels, net, cfg)[1]

    return max(grad_check(single, flat, EPS), grad_check(batch, flat, EPS))


def check_total_loss(seed: int) -> float:
    rng = _rng(seed, 14)
    cfg = LossConfig(alpha=float(rng.uniform(0.05, 1)), beta=float(rng.uniform(0.5, 2)))
    v = rng.uniform(size=2)
    return grad_check(lambda t: total_loss(tn.sum_all(tn.rows(t, 0, 1)),
                                           tn.sum_all(tn.rows(t, 1, 2)), cfg), v, EPS)


CHECKS: dict[str, Callable[[int], float]] = {
    "elementwise": check_elementwise,
    "matmul": check_matmul,
    "linear": check_linear,
    "conv3d": check_conv3d,
    "softmax": check_softmax,
    "normalisation": check_normalisation,
    "shape_ops": check_shape_ops,
    "make_filters": check_make_filters,
    "apply_filters": check_apply_filters,
    "huber_fp[per-pixel]": check_huber_per_pixel,
    "huber_fp[frame-norm]": check_huber_frame_norm,
    "cross_entropy": check_cross_entropy,
    "total_loss": check_total_loss,
    "composite": check_composite,
}


def run_checks(seeds=(0,), names=None) -> dict[str, float]:
    """Worst relative error per check over ``seeds``."""
    names = list(CHECKS) if names is None else list(names)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ValueError(f"unknown checks {unknown}")
    return {n: max(CHECKS[n](int(s)) for s in seeds) for n in names}


def all_pass(errors: dict[str, float], tol: float = TOLERANCE) -> bool:
    return all(e < tol for e in errors.values())
