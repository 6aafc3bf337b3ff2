"""Sample-conditioned motion filters and their application to frames."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, pad_replicate, record, reshape, softmax, unpad_replicate


@dataclass
class DynamicFilterBank:
    """One softmax-normalised s×s filter per input frame.

    ``filters`` is a T×s×s tensor; every filter is nonnegative and sums to 1.
    """

    filters: Tensor

    @property
    def T(self) -> int:
        return self.filters.shape[0]

    @property
    def s(self) -> int:
        return self.filters.shape[1]


def make_filters(logits: Tensor) -> DynamicFilterBank:
    """Softmax each row of T×s² logits and reshape to T×s×s."""
    if logits.data.ndim != 2:
        raise ValueError(f"filter logits must be T×s², got shape {logits.shape}")
    T, taps = logits.shape
    if T < 1:
        raise ValueError("need at least one frame")
    s = math.isqrt(taps)
    if s * s != taps:
        raise ValueError(f"tap count {taps} is not a perfect square")
    return DynamicFilterBank(reshape(softmax(logits, axis=1), (T, s, s)))


def apply_filters(clip: Tensor, bank: DynamicFilterBank) -> Tensor:
    """Predict the next frame for every input frame.

    ``out[t] = filters[t] ⋆ clip[t]`` evaluated at every pixel with
    clamp-to-edge borders, so ``out[t]`` estimates frame t+1. Taps are
    accumulated in row-major order.
    """
    F = bank.filters
    if clip.data.ndim != 3:
        raise ValueError(f"clip must be T×H×W, got {clip.shape}")
    T, H, W = clip.shape
    if F.shape[0] != T:
        raise ValueError(f"filter bank has {F.shape[0]} frames, clip has {T}")
    s = F.shape[1]
    if F.shape[2] != s or s % 2 == 0:
        raise ValueError(f"filters must be square with odd size, got {F.shape[1:]}")
    r = s // 2
    pads = ((0, 0), (r, r), (r, r))
    xp = pad_replicate(clip.data, pads)
    fd = F.data
    out = np.zeros(clip.shape, dtype=np.result_type(clip.data, fd))
    for i in range(s):
        for j in range(s):
            out += fd[:, i, j, None, None] * xp[:, i:i + H, j:j + W]

    def backward(g):
        gf = np.empty_like(fd)
        for i in range(s):
            for j in range(s):
                gf[:, i, j] = np.einsum("tyx,tyx->t", g, xp[:, i:i + H, j:j + W])
        gx = None
        if clip.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(s):
                for j in range(s):
                    gxp[:, i:i + H, j:j + W] += fd[:, i, j, None, None] * g
            gx = unpad_replicate(gxp, pads)
        return gx, gf

    return record("apply_filters", out, (clip, F), backward)


def flatten_dmr_input(bank: DynamicFilterBank) -> Tensor:
    """Concatenate the filters row-major in frame order into a T·s² vector."""
    return reshape(bank.filters, (-1,))
