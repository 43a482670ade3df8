"""Command-line entry point.

Subcommands: train, sweep, verify-theorem, latent-eval, export, bench,
export-csv, make-data. Run configs are JSON files (see config module).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data as datamod
from .config import ConfigError, load_dataset, parse_config
from .latent import (LatentState, SGD, per_weight_rescale_demo,
                     verify_scale_invariance)
from .packed import bench, load_checkpoint, save_checkpoint
from .telemetry import jsonl_to_csv, latent_eval_experiment
from .train import run_sweep, run_training


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v != ""]


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bitflip",
                                 description="Binarized network training and inference")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train per a JSON run config")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("sweep", help="grid sweep over gamma/tau values")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--gamma", required=True, type=_floats,
                   help="comma-separated adaptivity rates")
    p.add_argument("--tau", required=True, type=_floats,
                   help="comma-separated thresholds")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("verify-theorem",
                       help="check that scaling (lr, initial magnitudes) by a power "
                            "of two leaves the binary trajectory bit-identical")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--scale", type=float, default=4.0)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--per-weight", action="store_true",
                   help="use random per-weight power-of-two scales instead")

    p = sub.add_parser("latent-eval",
                       help="evaluate a trained checkpoint with binarized vs raw "
                            "latent weights")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--retrain-bn", action="store_true")

    p = sub.add_parser("export", help="convert a checkpoint to packed deployment form")
    p.add_argument("--ckpt", required=True)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("bench", help="packed vs reference forward micro-benchmark")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--repeats", type=int, default=100)

    p = sub.add_parser("export-csv", help="convert a JSONL log to RFC-4180 CSV")
    p.add_argument("--log", required=True)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("make-data", help="write a synthetic desk-scale corpus in the "
                                         "real on-disk format (IDX or CIFAR batches)")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=["mnist", "cifar10"], default="mnist")
    p.add_argument("--n-train", type=int, default=8000)
    p.add_argument("--n-test", type=int, default=2000)
    p.add_argument("--seed", type=int, default=7)
    return ap


def _cmd_train(args) -> int:
    summary = run_training(parse_config(args.config), quiet=args.quiet)
    print(json.dumps(summary, indent=2))
    return 0


def _cmd_sweep(args) -> int:
    rows = run_sweep(parse_config(args.config), args.gamma, args.tau, quiet=args.quiet)
    print(json.dumps(rows, indent=2))
    return 1 if any("error" in r for r in rows) else 0


def _cmd_verify(args) -> int:
    cfg = parse_config(args.config)
    if cfg.optimizer != SGD:
        raise ConfigError("verify-theorem requires optimizer=sgd")
    train_h, _ = load_dataset(cfg)
    if args.per_weight:
        report = per_weight_rescale_demo(cfg.model, cfg.latent, args.steps,
                                         train_h.x, train_h.y, cfg.seed,
                                         batch_size=cfg.batch_size)
    else:
        report = verify_scale_invariance(cfg.model, cfg.latent, args.scale, args.steps,
                                         train_h.x, train_h.y, cfg.seed,
                                         batch_size=cfg.batch_size)
    print(json.dumps(report, indent=2))
    return 0


def _cmd_latent_eval(args) -> int:
    cfg = parse_config(args.config)
    ckpt = load_checkpoint(args.ckpt)
    latents = {i: LatentState(w=w) for i, w in ckpt.latent_weights().items()}
    train_h, test_h = load_dataset(cfg)
    params = ckpt.eval_params()
    report = latent_eval_experiment(ckpt.model, params, latents,
                                    train_h.x, train_h.y, test_h.x, test_h.y,
                                    retrain_bn=args.retrain_bn)
    print(json.dumps(report, indent=2))
    return 0


def _cmd_export(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    save_checkpoint(ckpt.packed(), args.output)
    print(json.dumps({"output": args.output}))
    return 0


def _cmd_bench(args) -> int:
    report = bench(load_checkpoint(args.ckpt), batch=args.batch, repeats=args.repeats)
    print(json.dumps(report, indent=2))
    return 0


def _cmd_export_csv(args) -> int:
    jsonl_to_csv(args.log, args.output)
    print(json.dumps({"output": args.output}))
    return 0


def _cmd_make_data(args) -> int:
    out = Path(args.out)
    if args.kind == "mnist":
        datamod.write_synthetic_mnist(out, n_train=args.n_train, n_test=args.n_test,
                                      seed=args.seed)
    else:
        datamod.write_synthetic_cifar10(out, seed=args.seed)
    print(json.dumps({"output": str(out), "kind": args.kind}))
    return 0


_HANDLERS = {
    "train": _cmd_train,
    "sweep": _cmd_sweep,
    "verify-theorem": _cmd_verify,
    "latent-eval": _cmd_latent_eval,
    "export": _cmd_export,
    "bench": _cmd_bench,
    "export-csv": _cmd_export_csv,
    "make-data": _cmd_make_data,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
