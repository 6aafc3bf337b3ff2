"""Small two-headed 3-D conv network with dynamic motion filters.

Trunk: stride-2 (spatial) 3-D convolutions with relu; the temporal axis is
never strided so every frame keeps its own feature column.

Filter head: two 3×3×3 convolutions, spatial mean pooling, per-channel
normalisation of the pooled per-frame features, then a per-frame linear map
to s² logits that become the dynamic filter bank. The normalisation uses
batch statistics while training and stored population statistics
otherwise; without it the prediction loss collapses every filter onto the
clip-independent identity solution before motion features can form.

Classification: AR is the trunk's global mean pushed through a linear layer,
DMR is a linear projection of the flattened filter bank, and the class
logits are a linear map of ``concat(AR, DMR)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dynfilter
from .dynfilter import DynamicFilterBank
from .formats import FormatError, Reader
from .losses import LossConfig, cross_entropy, huber_fp, total_loss
from .tensor import (TRAIN_DTYPE, Tensor, concat, conv3d, linear, mean, no_grad,
                     relu, reshape, rows, shift_scale, standardize, transpose)

MODEL_MAGIC = b"DYNM"
MODEL_VERSION = 1

# sections that belong to the classification branch; pretraining leaves them alone
CLASSIFIER_PREFIXES = ("ar.", "dmr.", "cls.")
# sections computed per clip before batch normalisation
ENCODER_PREFIXES = ("trunk.", "filter.conv")
# normalisation statistics: stored with the model, never touched by SGD
BUFFER_SECTIONS = ("filter.norm.mean", "filter.norm.var")
NORM_EPS = 1e-5


@dataclass(frozen=True)
class NetworkConfig:
    T: int = 16
    H: int = 32
    W: int = 32
    s: int = 5
    dmr_dim: int = 512
    ar_dim: int = 64
    trunk_channels: tuple = (8, 16)
    num_classes: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "trunk_channels", tuple(int(c) for c in self.trunk_channels))
        if self.s < 1 or self.s % 2 == 0:
            raise ValueError(f"filter size must be odd, got {self.s}")
        for name in ("T", "H", "W", "num_classes", "dmr_dim", "ar_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.trunk_channels or min(self.trunk_channels) < 1:
            raise ValueError("trunk needs at least one block with >= 1 channel")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must fit in 64 bits")

    @property
    def head_channels(self) -> int:
        return self.trunk_channels[-1]


def param_shapes(cfg: NetworkConfig) -> dict[str, tuple]:
    """Section name -> shape, in canonical (file) order."""
    shapes = {}
    cin = 1
    for i, c in enumerate(cfg.trunk_channels):
        shapes[f"trunk.{i}.w"] = (c, cin, 3, 3, 3)
        shapes[f"trunk.{i}.b"] = (c,)
        cin = c
    ch = cfg.head_channels
    for i in range(2):
        shapes[f"filter.conv{i}.w"] = (ch, ch, 3, 3, 3)
        shapes[f"filter.conv{i}.b"] = (ch,)
    shapes["filter.norm.mean"] = (ch,)
    shapes["filter.norm.var"] = (ch,)
    shapes["filter.fc.w"] = (ch, cfg.s * cfg.s)
    shapes["filter.fc.b"] = (cfg.s * cfg.s,)
    shapes["ar.w"] = (ch, cfg.ar_dim)
    shapes["ar.b"] = (cfg.ar_dim,)
    shapes["dmr.w"] = (cfg.T * cfg.s * cfg.s, cfg.dmr_dim)
    shapes["dmr.b"] = (cfg.dmr_dim,)
    shapes["cls.w"] = (cfg.ar_dim + cfg.dmr_dim, cfg.num_classes)
    shapes["cls.b"] = (cfg.num_classes,)
    return shapes


def is_classifier_section(name: str) -> bool:
    return name.startswith(CLASSIFIER_PREFIXES)


def is_encoder_section(name: str) -> bool:
    return name.startswith(ENCODER_PREFIXES)


def is_buffer(name: str) -> bool:
    return name in BUFFER_SECTIONS


def trainable_sections(params) -> list[str]:
    return [k for k in params if not is_buffer(k)]


def init_params(cfg: NetworkConfig, dtype=TRAIN_DTYPE) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform weights, zero biases, identity normalisation.

    Convolutions use bound sqrt(6 / fan_in) (they feed a relu); linear maps
    use 1 / sqrt(fan_in).
    """
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "filter.norm.var":
            params[name] = np.ones(shape, dtype=dtype)
            continue
        if name.endswith(".b") or name == "filter.norm.mean":
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        if len(shape) == 5:
            bound = np.sqrt(6.0 / np.prod(shape[1:]))
        else:
            bound = 1.0 / np.sqrt(shape[0])
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def cast_params(params: dict[str, np.ndarray], dtype) -> dict[str, np.ndarray]:
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


@dataclass
class Encoding:
    """Per-clip features that feed both heads."""
    pooled: Tensor           # global mean of the trunk output (AR input)
    frame_features: Tensor   # T×C spatially pooled filter-head features


@dataclass
class ForwardOutput:
    filter_logits: Tensor
    bank: DynamicFilterBank
    predicted: Tensor
    ar: Tensor
    dmr: Tensor
    class_logits: Tensor


def _t(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(v)


def _check_clip(clip: Tensor, cfg: NetworkConfig) -> None:
    if clip.shape != (cfg.T, cfg.H, cfg.W):
        raise ValueError(f"clip shape {clip.shape} does not match config {(cfg.T, cfg.H, cfg.W)}")


def encode(params, clip, cfg: NetworkConfig) -> Encoding:
    """Trunk and filter-head convolutions for one T×H×W clip."""
    clip = _t(clip)
    _check_clip(clip, cfg)
    p = {k: _t(v) for k, v in params.items()}
    h = reshape(clip, (1,) + clip.shape)
    for i in range(len(cfg.trunk_channels)):
        h = relu(conv3d(h, p[f"trunk.{i}.w"], p[f"trunk.{i}.b"], spatial_stride=2))
    f = h
    for i in range(2):
        f = relu(conv3d(f, p[f"filter.conv{i}.w"], p[f"filter.conv{i}.b"]))
    return Encoding(mean(h, axis=(1, 2, 3)), transpose(mean(f, axis=(2, 3))))


def normalize_batch(features: Sequence[Tensor]) -> list[Tensor]:
    """Training-mode normalisation: every channel is standardised over all
    frames of all clips in the batch, then split back per clip."""
    if not features:
        raise ValueError("empty batch")
    sizes = [f.shape[0] for f in features]
    stacked = standardize(concat(list(features), axis=0), axis=0, eps=NORM_EPS)
    out, start = [], 0
    for n in sizes:
        out.append(rows(stacked, start, start + n))
        start += n
    return out


def normalize_fixed(features: Tensor, params) -> Tensor:
    """Inference-mode normalisation with the stored population statistics."""
    m = _t(params["filter.norm.mean"]).data.astype(np.float64)
    v = _t(params["filter.norm.var"]).data.astype(np.float64)
    return shift_scale(features, m, 1.0 / np.sqrt(v + NORM_EPS))


def decode(params, clip, pooled: Tensor, normed: Tensor, cfg: NetworkConfig) -> ForwardOutput:
    """Filter bank, predicted frames and class logits from normalised features."""
    clip = _t(clip)
    p = {k: _t(v) for k, v in params.items()}
    logits = linear(normed, p["filter.fc.w"], p["filter.fc.b"])
    bank = dynfilter.make_filters(logits)
    predicted = dynfilter.apply_filters(clip, bank)
    ar = linear(pooled, p["ar.w"], p["ar.b"])
    dmr = linear(dynfilter.flatten_dmr_input(bank), p["dmr.w"], p["dmr.b"])
    class_logits = linear(concat([ar, dmr]), p["cls.w"], p["cls.b"])
    return ForwardOutput(logits, bank, predicted, ar, dmr, class_logits)


def forward(params, clip, cfg: NetworkConfig) -> ForwardOutput:
    """Run the network on a T×H×W clip (inference-mode normalisation).

    ``params`` maps section names to arrays or Tensors (pass Tensors with
    ``requires_grad=True`` to get gradients). ``predicted[t]`` estimates
    frame t+1.
    """
    enc = encode(params, clip, cfg)
    return decode(params, clip, enc.pooled, normalize_fixed(enc.frame_features, params), cfg)


def forward_batch(params, clips, cfg: NetworkConfig) -> list[ForwardOutput]:
    """Training-mode forward of several clips on one tape (batch statistics)."""
    encs = [encode(params, c, cfg) for c in clips]
    normed = normalize_batch([e.frame_features for e in encs])
    return [decode(params, c, e.pooled, n, cfg) for c, e, n in zip(clips, encs, normed)]


@dataclass
class ClipLosses:
    out: ForwardOutput
    fp: Tensor
    cls: Tensor
    total: Tensor


def _split_frames(frames, cfg: NetworkConfig) -> np.ndarray:
    frames = np.asarray(frames)
    if frames.shape[0] != cfg.T + 1:
        raise ValueError(f"expected {cfg.T + 1} stored frames, got {frames.shape[0]}")
    return frames


def output_losses(out: ForwardOutput, frames, label: int, cfg: NetworkConfig,
                  loss_cfg: LossConfig = LossConfig()) -> ClipLosses:
    """Frames 1..T are the prediction targets for ``out.predicted``."""
    frames = _split_frames(frames, cfg)
    fp = huber_fp(out.predicted, Tensor(frames[1:]), loss_cfg)
    cls = cross_entropy(out.class_logits, label)
    return ClipLosses(out, fp, cls, total_loss(fp, cls, loss_cfg))


def clip_losses(params, frames, label: int, cfg: NetworkConfig,
                loss_cfg: LossConfig = LossConfig()) -> ClipLosses:
    """Forward a stored clip of T+1 frames (inference mode) and compute all losses.

    Frames 0..T-1 are the network input; frames 1..T are the prediction
    targets.
    """
    frames = _split_frames(frames, cfg)
    return output_losses(forward(params, frames[:cfg.T], cfg), frames, label, cfg, loss_cfg)


def batch_losses(params, frames_list, labels, cfg: NetworkConfig,
                 loss_cfg: LossConfig = LossConfig()) -> tuple[list[ClipLosses], Tensor]:
    """Training-mode losses of a batch and their mean total, on one tape."""
    frames_list = [_split_frames(f, cfg) for f in frames_list]
    outs = forward_batch(params, [f[:cfg.T] for f in frames_list], cfg)
    per_clip = [output_losses(o, f, lab, cfg, loss_cfg) for o, f, lab in zip(outs, frames_list, labels)]
    return per_clip, mean_of([c.total for c in per_clip])


def mean_of(values: Sequence[Tensor]) -> Tensor:
    """Mean of scalar tensors, summed in list order."""
    return mean(concat([reshape(v, (1,)) for v in values]))


def feature_statistics(params, clips, cfg: NetworkConfig) -> tuple[np.ndarray, np.ndarray]:
    """Population mean and (biased) variance of the per-frame filter-head
    features over ``clips``, accumulated in order in 64-bit."""
    total = sq = None
    n = 0
    with no_grad():
        for clip in clips:
            f = encode(params, np.asarray(clip)[:cfg.T], cfg).frame_features.data.astype(np.float64)
            total = f.sum(axis=0) if total is None else total + f.sum(axis=0)
            sq = (f * f).sum(axis=0) if sq is None else sq + (f * f).sum(axis=0)
            n += f.shape[0]
    if n == 0:
        raise ValueError("need at least one clip to estimate feature statistics")
    m = total / n
    return m, np.maximum(sq / n - m * m, 0.0)


def calibrate(params: dict, clips, cfg: NetworkConfig) -> dict:
    """Copy of ``params`` whose normalisation buffers hold the statistics of ``clips``."""
    m, v = feature_statistics(params, clips, cfg)
    out = dict(params)
    dt = np.asarray(params["filter.norm.mean"]).dtype
    out["filter.norm.mean"] = m.astype(dt)
    out["filter.norm.var"] = v.astype(dt)
    return out


# ---------------------------------------------------------------- persistence

def save_model(params: dict[str, np.ndarray], cfg: NetworkConfig, path) -> None:
    """Write the DYNM container (little-endian, float32 payloads)."""
    shapes = param_shapes(cfg)
    out = [MODEL_MAGIC, struct.pack("<I", MODEL_VERSION),
           struct.pack("<6I", cfg.T, cfg.H, cfg.W, cfg.s, cfg.dmr_dim, cfg.ar_dim),
           struct.pack("<I", len(cfg.trunk_channels)),
           struct.pack(f"<{len(cfg.trunk_channels)}I", *cfg.trunk_channels),
           struct.pack("<I", cfg.num_classes),
           struct.pack("<Q", cfg.seed)]
    for name, shape in shapes.items():
        arr = np.asarray(params[name])
        if arr.shape != shape:
            raise ValueError(f"section {name} has shape {arr.shape}, expected {shape}")
        raw = name.encode()
        out += [struct.pack("<I", len(raw)), raw, struct.pack("<Q", arr.size),
                arr.astype("<f4").tobytes()]
    Path(path).write_bytes(b"".join(out))


def load_model(path) -> tuple[dict[str, np.ndarray], NetworkConfig]:
    rd = Reader(Path(path).read_bytes(), "model file")
    rd.expect_header(MODEL_MAGIC, MODEL_VERSION)
    T, H, W, s, dmr_dim, ar_dim = rd.unpack("<6I")
    nblocks = rd.u32()
    channels = rd.unpack(f"<{nblocks}I")
    num_classes = rd.u32()
    seed = rd.u64()
    cfg = NetworkConfig(T=T, H=H, W=W, s=s, dmr_dim=dmr_dim, ar_dim=ar_dim,
                        trunk_channels=channels, num_classes=num_classes, seed=seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        n = rd.u32()
        got = bytes(rd.take(n)).decode()
        if got != name:
            raise FormatError(f"expected section {name!r}, found {got!r}")
        count = rd.u64()
        if count != int(np.prod(shape)):
            raise FormatError(f"section {name} has {count} values, expected {int(np.prod(shape))}")
        params[name] = np.frombuffer(rd.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
    if not rd.at_end():
        raise FormatError("trailing bytes after last section")
    return params, cfg
