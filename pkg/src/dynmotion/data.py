"""Synthetic moving-sprite clips, the DYNV dataset container and PGM export.

Randomness comes from SplitMix64. Clip ``i`` of a dataset generated with
``seed`` draws from its own stream whose initial state is
``mix64(seed ^ mix64(i + 1))``, so clips can be generated in any order or
in parallel without changing a byte.
"""
from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .formats import RangeError, Reader, TruncatedError

DATASET_MAGIC = b"DYNV"
DATASET_VERSION = 1
MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN = 0x9E3779B97F4A7C15

CLASS_NAMES = ("left", "right", "up", "down")
# (dy, dx) unit direction per class
DIRECTIONS = {"left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0)}
SHAPES = ("rectangle", "disc", "cross")


class PixelRangeError(RangeError):
    pass


class LabelRangeError(RangeError):
    pass


def mix64(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """state += golden gamma; output = mix64(state)."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return mix64(self.state)

    def below(self, n: int) -> int:
        """Integer in [0, n) by modulo reduction."""
        return self.next_u64() % n

    def integer(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] inclusive."""
        return lo + self.below(hi - lo + 1)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * ((self.next_u64() >> 11) * 2.0 ** -53)


def clip_stream(seed: int, index: int) -> SplitMix64:
    return SplitMix64(mix64((seed ^ mix64(index + 1)) & MASK64))


@dataclass(frozen=True)
class SyntheticSpec:
    """Generation parameters.

    ``boundary="wrap"`` moves sprites on a torus so every single frame has
    the same position distribution for all classes. ``"inside"`` keeps the
    whole trajectory strictly inside the frame, which requires
    ``size + speed * (T_stored - 1) + 2 <= extent``. ``speeds=None`` means
    every speed in (1, 2) that is feasible.
    """

    num_clips: int = 800
    T: int = 16
    H: int = 32
    W: int = 32
    num_classes: int = 4
    size_range: tuple = (5, 9)
    intensity_range: tuple = (0.5, 1.0)
    speeds: tuple | None = None
    boundary: str = "wrap"

    @property
    def T_stored(self) -> int:
        return self.T + 1

    def resolved_speeds(self) -> tuple:
        cands = (1, 2) if self.speeds is None else tuple(self.speeds)
        if self.boundary == "wrap":
            return cands
        ok = tuple(v for v in cands if self._fits(v))
        if self.speeds is not None and ok != cands:
            raise ValueError(f"speeds {cands} infeasible for {self.H}x{self.W}, {self.T_stored} frames")
        if not ok:
            raise ValueError("no feasible speed: trajectory cannot stay inside the frame")
        return ok

    def _fits(self, v: int) -> bool:
        travel = v * (self.T_stored - 1)
        return self.size_range[1] + travel + 2 <= min(self.H, self.W)

    def validate(self) -> None:
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in 1..{len(CLASS_NAMES)}")
        if self.T < 1 or self.num_clips < 0:
            raise ValueError("T must be >= 1 and num_clips >= 0")
        lo, hi = self.size_range
        if not 1 <= lo <= hi or hi + 2 > min(self.H, self.W):
            raise ValueError(f"sprite size range {self.size_range} does not fit {self.H}x{self.W}")
        ilo, ihi = self.intensity_range
        if not 0 <= ilo <= ihi <= 1:
            raise ValueError("intensity range must lie in [0, 1]")
        if self.boundary not in ("wrap", "inside"):
            raise ValueError(f"unknown boundary mode {self.boundary!r}")
        if any(v < 1 for v in self.resolved_speeds()):
            raise ValueError("speeds must be positive integers")


@dataclass(frozen=True)
class Sprite:
    kind: str
    size: int
    width: int
    intensity: float

    def mask(self) -> np.ndarray:
        n = self.size
        if self.kind == "rectangle":
            m = np.zeros((n, n), dtype=bool)
            off = (n - self.width) // 2
            m[:, off:off + self.width] = True
            return m
        yy, xx = np.mgrid[:n, :n]
        c = (n - 1) / 2
        if self.kind == "disc":
            return (yy - c) ** 2 + (xx - c) ** 2 <= (n / 2) ** 2
        if self.kind == "cross":
            half = max(1, n // 3) / 2
            return (np.abs(yy - c) < half) | (np.abs(xx - c) < half)
        raise ValueError(f"unknown sprite kind {self.kind!r}")


def render_clip(sprite: Sprite, start: tuple, velocity: tuple, n_frames: int,
                H: int, W: int, boundary: str = "wrap") -> np.ndarray:
    """Frames of a sprite whose top-left corner moves from ``start`` by ``velocity`` per frame."""
    m = sprite.mask()
    ys, xs = np.nonzero(m)
    frames = np.zeros((n_frames, H, W), dtype=np.float32)
    val = np.float32(sprite.intensity)
    for t in range(n_frames):
        y = start[0] + velocity[0] * t + ys
        x = start[1] + velocity[1] * t + xs
        if boundary == "wrap":
            y, x = y % H, x % W
        elif y.min() < 1 or x.min() < 1 or y.max() > H - 2 or x.max() > W - 2:
            raise ValueError("sprite touches the frame boundary")
        frames[t, y, x] = val
    return frames


def sample_clip(spec: SyntheticSpec, seed: int, index: int):
    """Draw (sprite, start, velocity, label) for clip ``index``."""
    rng = clip_stream(seed, index)
    label = index % spec.num_classes
    speeds = spec.resolved_speeds()
    kind = SHAPES[rng.below(len(SHAPES))]
    size = rng.integer(*spec.size_range)
    width = rng.integer((size + 1) // 2, size)
    intensity = float(np.float32(rng.uniform(*spec.intensity_range)))
    speed = speeds[rng.below(len(speeds))]
    dy, dx = DIRECTIONS[CLASS_NAMES[label]]
    vel = (dy * speed, dx * speed)
    travel = speed * spec.T
    if spec.boundary == "wrap":
        start = (rng.below(spec.H), rng.below(spec.W))
    else:
        start = tuple(
            _inside_start(rng, extent, size, d * speed, travel)
            for extent, d in ((spec.H, dy), (spec.W, dx)))
    return Sprite(kind, size, width, intensity), start, vel, label


def _inside_start(rng: SplitMix64, extent: int, size: int, v: int, travel: int) -> int:
    lo, hi = 1, extent - 1 - size
    if v > 0:
        hi -= travel
    elif v < 0:
        lo += travel
    return rng.integer(lo, hi)


@dataclass
class VideoClip:
    frames: np.ndarray  # T_stored×H×W in [0, 1]
    label: int


@dataclass
class Dataset:
    frames: np.ndarray  # N×T_stored×H×W float32
    labels: np.ndarray  # N uint32
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise ValueError(f"frames must be N×T×H×W, got {self.frames.shape}")
        if len(self.labels) != len(self.frames):
            raise ValueError("label count does not match clip count")
        if self.frames.shape[1] < 2:
            raise ValueError("need at least 2 stored frames per clip")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> VideoClip:
        return VideoClip(self.frames[i], int(self.labels[i]))

    @property
    def T_stored(self) -> int:
        return self.frames.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.frames[idx], self.labels[idx], self.num_classes, dict(self.meta))

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return self.subset(np.arange(n_first)), self.subset(np.arange(n_first, len(self)))


def gen_synthetic(spec: SyntheticSpec, seed: int, threads: int = 1) -> Dataset:
    """Generate a balanced motion-class dataset (labels assigned round-robin)."""
    spec.validate()

    def one(i):
        sprite, start, vel, label = sample_clip(spec, seed, i)
        return render_clip(sprite, start, vel, spec.T_stored, spec.H, spec.W, spec.boundary), label

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(one, range(spec.num_clips)))
    else:
        results = [one(i) for i in range(spec.num_clips)]
    frames = np.zeros((spec.num_clips, spec.T_stored, spec.H, spec.W), dtype=np.float32)
    labels = np.zeros(spec.num_clips, dtype=np.uint32)
    for i, (f, lab) in enumerate(results):
        frames[i] = f
        labels[i] = lab
    return Dataset(frames, labels, spec.num_classes)


# ---------------------------------------------------------------- DYNV files

def dataset_bytes(ds: Dataset) -> bytes:
    N, Ts, H, W = ds.frames.shape
    head = DATASET_MAGIC + struct.pack("<7I", DATASET_VERSION, N, Ts, H, W, 1, ds.num_classes)
    body = []
    for i in range(N):
        body.append(struct.pack("<I", int(ds.labels[i])))
        body.append(np.ascontiguousarray(ds.frames[i], dtype="<f4").tobytes())
    return head + b"".join(body)


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def parse_dataset(buf: bytes) -> Dataset:
    rd = Reader(buf, "dataset file")
    rd.expect_header(DATASET_MAGIC, DATASET_VERSION)
    N, Ts, H, W, C, K = rd.unpack("<6I")
    if C != 1:
        raise RangeError(f"only single-channel datasets are supported, got C={C}")
    if Ts < 2:
        raise RangeError("T_stored must be >= 2")
    per = Ts * H * W
    frames = np.empty((N, Ts, H, W), dtype=np.float32)
    labels = np.empty(N, dtype=np.uint32)
    for i in range(N):
        try:
            lab = rd.u32()
            raw = rd.take(4 * per)
        except TruncatedError as e:
            raise TruncatedError(f"header declares {N} clips, file ends inside clip {i}") from e
        if lab >= K:
            raise LabelRangeError(f"clip {i}: label {lab} >= num_classes {K}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(Ts, H, W)
        if not (np.isfinite(arr).all() and arr.min(initial=0) >= 0 and arr.max(initial=0) <= 1):
            raise PixelRangeError(f"clip {i}: pixel values outside [0, 1]")
        frames[i] = arr
        labels[i] = lab
    if not rd.at_end():
        raise RangeError("trailing bytes after the last clip")
    return Dataset(frames, labels, K)


def load_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes())


# ---------------------------------------------------------------- PGM export

def to_bytes(frame: np.ndarray) -> np.ndarray:
    """round(v * 255) with halves rounded up; values must already be in [0, 1]."""
    v = np.asarray(frame, dtype=np.float64)
    if v.min(initial=0) < 0 or v.max(initial=0) > 1:
        raise ValueError("PGM export expects values in [0, 1]")
    return np.floor(v * 255 + 0.5).astype(np.uint8)


def export_pgm(frame, path) -> None:
    frame = np.asarray(frame)
    if frame.ndim != 2:
        raise ValueError(f"expected an H×W frame, got {frame.shape}")
    H, W = frame.shape
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode() + to_bytes(frame).tobytes())


def diff_image(pred, gt) -> np.ndarray:
    """Signed residual mapped around mid-gray: 0.5 + (pred - gt) / 2, clamped."""
    return np.clip(0.5 + (np.asarray(pred, np.float64) - np.asarray(gt, np.float64)) / 2, 0, 1)
