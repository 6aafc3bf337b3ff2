"""Frame-prediction quality (SSIM, PSNR), accuracy and run comparison."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .model import NetworkConfig, forward
from .tensor import no_grad

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def gaussian_taps(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _blur_matrix(n: int, taps: np.ndarray) -> np.ndarray:
    r = len(taps) // 2
    i = np.arange(n)
    off = i[None, :] - i[:, None]
    return np.where(np.abs(off) <= r, taps[np.clip(off + r, 0, 2 * r)], 0.0)


def ssim_map(a, b) -> np.ndarray:
    """Local SSIM at every pixel; windows are cut at the border and renormalised."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"ssim needs two frames of equal shape, got {a.shape} and {b.shape}")
    taps = gaussian_taps()
    Gh, Gw = _blur_matrix(a.shape[0], taps), _blur_matrix(a.shape[1], taps)
    norm = np.outer(Gh.sum(axis=1), Gw.sum(axis=1))

    def blur(x):
        return (Gh @ x @ Gw.T) / norm

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    return ((2 * mu_a * mu_b + C1) * (2 * cov + C2)) / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2))


def ssim(a, b) -> float:
    """Mean SSIM, 11×11 Gaussian window (sigma 1.5), dynamic range 1."""
    return float(ssim_map(a, b).mean())


def psnr(a, b) -> float:
    """10 log10(1 / MSE); identical inputs give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0 else 10 * math.log10(1.0 / mse)


@dataclass
class MetricsReport:
    accuracy: float
    mean_ssim: float
    mean_psnr: float
    per_class_accuracy: list
    num_clips: int
    dataset_hash: str = ""
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["mean_psnr"] = _json_float(self.mean_psnr)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        if isinstance(d["mean_psnr"], str):
            d["mean_psnr"] = float(d["mean_psnr"])
        return cls(**d)


def _json_float(v: float):
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


def model_predictor(params, net_cfg: NetworkConfig):
    """Callable mapping T input frames to (predicted frames, class logits)."""
    def predict(clip):
        with no_grad():
            out = forward(params, clip, net_cfg)
        return out.predicted.data, out.class_logits.data
    return predict


def identity_predictor(num_classes: int, label: int = 0):
    """Copies each frame forward (the identity-filter baseline); always predicts ``label``."""
    logits = np.zeros(num_classes)
    logits[label] = 1.0

    def predict(clip):
        return np.asarray(clip), logits
    return predict


def _clip_scores(predict, frames, label):
    T = frames.shape[0] - 1
    pred, logits = predict(frames[:T])
    ss = [ssim(pred[t], frames[t + 1]) for t in range(T)]
    ps = [psnr(pred[t], frames[t + 1]) for t in range(T)]
    return ss, ps, int(np.argmax(logits)) == label


def evaluate_predictor(predict, ds: Dataset, dataset_hash: str = "", threads: int = 1,
                       meta=None) -> MetricsReport:
    """Score every clip; totals use exact (order-independent) summation."""
    work = lambda i: _clip_scores(predict, ds.frames[i], int(ds.labels[i]))
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(work, range(len(ds))))
    else:
        results = [work(i) for i in range(len(ds))]
    all_ssim = [s for r in results for s in r[0]]
    all_psnr = [p for r in results for p in r[1]]
    correct = [r[2] for r in results]
    K = ds.num_classes
    per_class = []
    for k in range(K):
        mask = ds.labels == k
        n = int(mask.sum())
        per_class.append(sum(c for c, m in zip(correct, mask) if m) / n if n else float("nan"))
    n = len(ds)
    return MetricsReport(
        accuracy=sum(correct) / n if n else float("nan"),
        mean_ssim=math.fsum(all_ssim) / len(all_ssim) if all_ssim else float("nan"),
        mean_psnr=math.fsum(all_psnr) / len(all_psnr) if all_psnr else float("nan"),
        per_class_accuracy=per_class,
        num_clips=n,
        dataset_hash=dataset_hash,
        meta=dict(meta or {}),
    )


def evaluate(params, net_cfg: NetworkConfig, ds: Dataset, dataset_hash: str = "",
             threads: int = 1, meta=None) -> MetricsReport:
    if ds.num_classes != net_cfg.num_classes:
        raise ValueError(f"dataset has {ds.num_classes} classes, model has {net_cfg.num_classes}")
    if ds.frames.shape[1:] != (net_cfg.T + 1, net_cfg.H, net_cfg.W):
        raise ValueError(f"dataset clips {ds.frames.shape[1:]} do not match model "
                         f"{(net_cfg.T + 1, net_cfg.H, net_cfg.W)}")
    return evaluate_predictor(model_predictor(params, net_cfg), ds, dataset_hash, threads, meta)


def compare_runs(a: MetricsReport, b: MetricsReport) -> dict:
    """Signed deltas a - b; both reports must come from the same dataset."""
    if a.dataset_hash != b.dataset_hash:
        raise ValueError(f"reports are for different datasets ({a.dataset_hash} vs {b.dataset_hash})")
    return {
        "dataset_hash": a.dataset_hash,
        "accuracy_delta": a.accuracy - b.accuracy,
        "ssim_delta": a.mean_ssim - b.mean_ssim,
        "psnr_delta": a.mean_psnr - b.mean_psnr if math.isfinite(a.mean_psnr - b.mean_psnr) else None,
        "run_a": a.meta,
        "run_b": b.meta,
    }


# ---------------------------------------------------------------- single-frame baseline

def single_frame_baseline(train: Dataset, test: Dataset, frame: int = 0, l2: float = 1e-3,
                          steps: int = 500, lr: float = 0.5) -> float:
    """Test accuracy of multinomial logistic regression on one frame per clip.

    Full-batch gradient descent on standardised pixels, zero init.
    """
    X = train.frames[:, frame].reshape(len(train), -1).astype(np.float64)
    Xt = test.frames[:, frame].reshape(len(test), -1).astype(np.float64)
    mu, sd = X.mean(axis=0), X.std(axis=0) + 1e-6
    X, Xt = (X - mu) / sd, (Xt - mu) / sd
    K = train.num_classes
    Y = np.eye(K)[train.labels]
    Wt = np.zeros((X.shape[1], K))
    b = np.zeros(K)
    for _ in range(steps):
        z = X @ Wt + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        d = (p - Y) / len(X)
        Wt -= lr * (X.T @ d + l2 * Wt)
        b -= lr * d.sum(axis=0)
    return float(np.mean(np.argmax(Xt @ Wt + b, axis=1) == test.labels))
