"""Command-line entry point: ``python -m dynmotion <command> [flags]``.

Exit codes: 0 success, 1 validation error (bad flags, malformed files,
failed checks), 2 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data import (SyntheticSpec, diff_image, export_pgm, gen_synthetic, parse_dataset,
                   save_dataset)
from .evaluation import MetricsReport, compare_runs, evaluate
from .formats import fnv1a64
from .gradcheck import CHECKS, TOLERANCE, all_pass, run_checks
from .model import NetworkConfig, forward, init_params, load_model, save_model
from .tensor import no_grad
from .trainer import TrainConfig, pretrain, train_joint

log = logging.getLogger("dynmotion")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="single source of all randomness")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--deterministic-logs", action="store_true",
                   help="omit timestamps so logs are byte-reproducible")


def _network_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--s", type=int, default=5, help="filter size (odd)")
    p.add_argument("--dmr-dim", type=int, default=512)
    p.add_argument("--ar-dim", type=int, default=64)
    p.add_argument("--channels", default="8,16", help="trunk channels, comma separated")
    p.add_argument("--init", help="start from this model file instead of a fresh init")


def _train_flags(p: argparse.ArgumentParser, beta: bool) -> None:
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--trace", help="JSON-lines per-epoch trace")
    p.add_argument("--limit", type=int, help="use only the first N clips")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--delta", type=float, default=0.01)
    p.add_argument("--huber-mode", choices=("per-pixel", "frame-norm"), default="per-pixel")
    if beta:
        p.add_argument("--beta", type=float, default=1.0)
        p.add_argument("--mode", choices=("joint", "cls-only"), default="joint")
    _network_flags(p)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dynmotion", description="Dynamic motion filters on synthetic video.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic motion dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, default=800)
    p.add_argument("--t", type=int, default=16)
    p.add_argument("--h", type=int, default=32)
    p.add_argument("--w", type=int, default=32)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--boundary", choices=("wrap", "inside"), default="wrap")
    _common(p)

    p = sub.add_parser("pretrain", help="frame-prediction-only training")
    _train_flags(p, beta=False)
    _common(p)

    p = sub.add_parser("train", help="joint (or classification-only) training")
    _train_flags(p, beta=True)
    _common(p)

    p = sub.add_parser("eval", help="accuracy, SSIM and PSNR of a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    _common(p)

    p = sub.add_parser("predict", help="export ground truth, prediction and residual PGMs")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--clip", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    _common(p)

    p = sub.add_parser("grad-check", help="finite-difference check of every op")
    p.add_argument("--count", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--only", action="append", choices=sorted(CHECKS),
                   help="restrict to these checks (repeatable)")
    _common(p)

    p = sub.add_parser("compare", help="metric deltas between two eval reports")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--out")
    _common(p)
    return ap


def _setup_logging(deterministic: bool) -> None:
    fmt = "%(levelname)s %(name)s: %(message)s" if deterministic else \
        "%(asctime)s %(levelname)s %(name)s: %(message)s"
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(fmt))
    root = logging.getLogger("dynmotion")
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO)
    root.propagate = False


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _read_dataset(path: str):
    raw = Path(path).read_bytes()
    return parse_dataset(raw), f"{fnv1a64(raw):016x}"


def _check_common(args) -> None:
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    if not 0 <= args.seed < 2 ** 64:
        raise UsageError("--seed must fit in 64 bits")


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(num_clips=args.clips, T=args.t, H=args.h, W=args.w,
                         num_classes=args.classes, boundary=args.boundary)
    ds = gen_synthetic(spec, seed=args.seed, threads=args.threads)
    save_dataset(ds, args.out)
    log.info("wrote %d clips to %s", len(ds), args.out)
    return EXIT_OK


def _training_setup(args):
    ds, _ = _read_dataset(args.data)
    if args.limit is not None:
        if not 1 <= args.limit <= len(ds):
            raise UsageError(f"--limit must lie in 1..{len(ds)}")
        ds = ds.subset(np.arange(args.limit))
    if args.init:
        params, net = load_model(args.init)
    else:
        channels = tuple(int(c) for c in args.channels.split(",") if c.strip())
        net = NetworkConfig(T=ds.T_stored - 1, H=ds.frames.shape[2], W=ds.frames.shape[3],
                            s=args.s, dmr_dim=args.dmr_dim, ar_dim=args.ar_dim,
                            trunk_channels=channels, num_classes=ds.num_classes, seed=args.seed)
        params = init_params(net)
    if ds.frames.shape[1:] != (net.T + 1, net.H, net.W):
        raise UsageError(f"dataset clips {ds.frames.shape[1:]} do not match model {(net.T + 1, net.H, net.W)}")
    return ds, net, params


def _train_config(args, mode: str) -> TrainConfig:
    return TrainConfig(lr=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
                       batch_size=args.batch_size, epochs=args.epochs, alpha=args.alpha,
                       beta=getattr(args, "beta", 1.0), delta=args.delta,
                       huber_mode=args.huber_mode, mode=mode, seed=args.seed,
                       threads=args.threads)


def cmd_pretrain(args) -> int:
    ds, net, params = _training_setup(args)
    cfg = _train_config(args, "pretrain")
    log.info("network %s", json.dumps(asdict(net), sort_keys=True))
    res = pretrain(ds, net, cfg, params=params, trace_path=args.trace)
    save_model(res.params, net, args.out)
    log.info("wrote %s", args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    ds, net, params = _training_setup(args)
    cfg = _train_config(args, args.mode)
    log.info("network %s", json.dumps(asdict(net), sort_keys=True))
    res = train_joint(ds, net, cfg, params=params, trace_path=args.trace)
    save_model(res.params, net, args.out)
    log.info("wrote %s", args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    params, net = load_model(args.model)
    ds, h = _read_dataset(args.data)
    model_hash = f"{fnv1a64(Path(args.model).read_bytes()):016x}"
    rep = evaluate(params, net, ds, dataset_hash=h, threads=args.threads,
                   meta={"model_hash": model_hash})
    _emit(rep.to_json(), args.out)
    return EXIT_OK


def cmd_predict(args) -> int:
    params, net = load_model(args.model)
    ds, _ = _read_dataset(args.data)
    if not 0 <= args.clip < len(ds):
        raise UsageError(f"--clip must lie in 0..{len(ds) - 1}")
    frames = ds.frames[args.clip]
    if frames.shape != (net.T + 1, net.H, net.W):
        raise UsageError(f"clip shape {frames.shape} does not match model {(net.T + 1, net.H, net.W)}")
    with no_grad():
        pred = forward(params, frames[:net.T], net).predicted.data
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t in range(net.T):
        # prediction t estimates stored frame t + 1
        gt = frames[t + 1]
        p = np.clip(pred[t], 0, 1)
        export_pgm(gt, out / f"gt_{t:02d}.pgm")
        export_pgm(p, out / f"pred_{t:02d}.pgm")
        export_pgm(diff_image(p, gt), out / f"diff_{t:02d}.pgm")
    log.info("wrote %d frame triples to %s", net.T, out)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    seeds = range(args.seed, args.seed + args.count)
    errors = run_checks(seeds, args.only)
    width = max(len(n) for n in errors)
    for name, err in errors.items():
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name:<{width}}  {err:.3e}  {status}")
    ok = all_pass(errors)
    print(f"max relative error {max(errors.values()):.3e} (tolerance {TOLERANCE:g}): "
          f"{'pass' if ok else 'fail'}")
    return EXIT_OK if ok else EXIT_INVALID


def cmd_compare(args) -> int:
    a = MetricsReport.from_json(Path(args.a).read_text())
    b = MetricsReport.from_json(Path(args.b).read_text())
    _emit(json.dumps(compare_runs(a, b), sort_keys=True), args.out)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "grad-check": cmd_grad_check,
    "compare": cmd_compare,
}


def run(argv=None) -> int:
    """Parse ``argv`` and execute; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        _setup_logging(args.deterministic_logs)
        _check_common(args)
        resolved = {k: v for k, v in sorted(vars(args).items())}
        log.info("config %s", json.dumps(resolved, sort_keys=True))
        return COMMANDS[args.command](args)
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError, FloatingPointError) as e:
        # FormatError and JSONDecodeError are ValueErrors
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(run())
