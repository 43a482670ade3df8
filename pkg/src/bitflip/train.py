"""Training loops for both optimizers, run artifacts, and the grid sweep.

Every run is deterministic given (config, seed): weight init, batch order,
and augmentation all derive from the config seed, so re-running a config
reproduces metrics and checkpoints byte-for-byte.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from pathlib import Path

import numpy as np

from . import nn
from .bop import BopState, bop_init, flip_step, schedule_value, Schedule, BopConfig
from .config import BOP, RunConfig, load_dataset
from .data import augment, shuffled_batches
from .latent import (LatentState, RealParamAdam, binary_weights, child_seed,
                     latent_init, latent_step)
from .packed import checkpoint_from_params, save_checkpoint
from .telemetry import FlipLogger, RunLogger, flip_count_latent

_INIT_KEY = 100
_STATE_KEY = 200
_SHUFFLE_KEY = 300
_AUGMENT_KEY = 400


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *key]))


def run_training(cfg: RunConfig, quiet: bool = False) -> dict:
    """Train per the config; writes logs and checkpoints under
    cfg.output_dir and returns a summary dict."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")

    train_h, test_h = load_dataset(cfg)
    model = cfg.model
    model.validate(input_shape=train_h.x.shape[1:], require_binary=True)

    params = nn.build_params(model, child_seed(cfg.seed, _INIT_KEY))
    bin_idx = model.binary_layer_indices()
    use_bop = cfg.optimizer == BOP

    bop_states: dict[int, BopState] = {}
    latents: dict[int, LatentState] = {}
    for i in bin_idx:
        shape = nn.binary_weight_shape(model.layers[i])
        seed_i = child_seed(cfg.seed, _STATE_KEY, i)
        if use_bop:
            bop_states[i] = bop_init(shape, seed=seed_i)
        else:
            latents[i] = latent_init(shape, seed=seed_i, scheme=cfg.init_scheme,
                                     scale=cfg.init_scale)

    real_opt = RealParamAdam(beta1=cfg.bn.beta1, beta2=cfg.bn.beta2,
                             epsilon=cfg.bn.epsilon)

    steps_per_epoch = math.ceil(len(train_h) / cfg.batch_size)
    # fresh run: drop stale logs so the writers start clean
    for stale in [out / "metrics.jsonl"] + [out / f"flips-{i}.jsonl" for i in bin_idx]:
        if stale.exists():
            stale.unlink()
    flip_logs = {i: FlipLogger(out / f"flips-{i}.jsonl",
                               total_weights=int(np.prod(nn.binary_weight_shape(model.layers[i]))))
                 for i in bin_idx}
    run_log = RunLogger(out / "metrics.jsonl")

    def current_signs(i: int) -> np.ndarray:
        return bop_states[i].w if use_bop else binary_weights(latents[i])

    def snapshot_checkpoint(path: Path) -> None:
        for i in bin_idx:
            params[i]["w"] = current_signs(i)
        if use_bop:
            bw = {i: bop_states[i].w for i in bin_idx}
            ckpt = checkpoint_from_params(model, params, bw).packed()
        else:
            ckpt = checkpoint_from_params(model, params, {i: latents[i].w for i in bin_idx})
        save_checkpoint(ckpt, path)

    best_val, best_epoch = -1.0, -1
    step = 0
    n_eval_train = min(len(train_h), cfg.eval_train_samples)
    history = []
    try:
        for epoch in range(cfg.epochs):
            shuffle_rng = _rng(cfg.seed, _SHUFFLE_KEY, epoch)
            aug_rng = _rng(cfg.seed, _AUGMENT_KEY, epoch)
            losses = []
            sched_at_start = {}
            for xb, yb in shuffled_batches(train_h, cfg.batch_size, shuffle_rng):
                if cfg.augment is not None:
                    xb = augment(xb, cfg.augment, aug_rng)
                for i in bin_idx:
                    params[i]["w"] = current_signs(i)
                _, cache = nn.forward(model, params, xb, nn.TRAIN)
                loss, grads = nn.backward(model, cache, yb)

                bn_lr = schedule_value(cfg.bn.lr, step, steps_per_epoch)
                if use_bop:
                    gamma = schedule_value(cfg.bop.gamma, step, steps_per_epoch)
                    tau = schedule_value(cfg.bop.tau, step, steps_per_epoch)
                    if not sched_at_start:
                        sched_at_start = {"gamma": gamma, "tau": tau, "bn_lr": bn_lr}
                    for i in bin_idx:
                        flips = flip_step(bop_states[i], grads.per_layer[i]["w"], gamma, tau)
                        flip_logs[i].log(step, flips.size)
                else:
                    lr = schedule_value(cfg.lr_schedule, step, steps_per_epoch)
                    if not sched_at_start:
                        sched_at_start = {"alpha": lr, "bn_lr": bn_lr}
                    for i in bin_idx:
                        g = nn.pseudo_gradient(cfg.latent.pseudo_grad,
                                               grads.per_layer[i]["w"], latents[i].w)
                        prev = params[i]["w"]
                        latent_step(latents[i], cfg.latent, g, lr=lr)
                        flip_logs[i].log(step, flip_count_latent(prev, binary_weights(latents[i])))
                real_opt.step(params, grads, model, bn_lr)
                losses.append(loss)
                step += 1

            for i in bin_idx:
                params[i]["w"] = current_signs(i)
            train_acc, _ = nn.evaluate(model, params, train_h.x[:n_eval_train],
                                       train_h.y[:n_eval_train])
            val_acc, _ = nn.evaluate(model, params, test_h.x, test_h.y)
            mean_loss = float(np.mean(losses))
            run_log.log(epoch + 1, train_acc, val_acc, mean_loss, **sched_at_start)
            history.append({"epoch": epoch + 1, "train_accuracy": train_acc,
                            "val_accuracy": val_acc, "loss": mean_loss})
            if not quiet:
                print(f"epoch {epoch + 1:3d}/{cfg.epochs}  loss {mean_loss:.4f}  "
                      f"train {train_acc:.4f}  val {val_acc:.4f}")
            if val_acc > best_val:
                best_val, best_epoch = val_acc, epoch + 1
                snapshot_checkpoint(out / "best.ckpt")
    finally:
        run_log.close()
        for lg in flip_logs.values():
            lg.close()

    snapshot_checkpoint(out / "final.ckpt")
    summary = {
        "epochs": cfg.epochs,
        "steps": step,
        "final_train_accuracy": history[-1]["train_accuracy"],
        "final_val_accuracy": history[-1]["val_accuracy"],
        "best_val_accuracy": best_val,
        "best_epoch": best_epoch,
        "mean_pi": float(np.mean([flip_logs[i].mean_pi for i in bin_idx])),
        "mean_pi_per_layer": {str(i): flip_logs[i].mean_pi for i in bin_idx},
        "final_checkpoint": str(out / "final.ckpt"),
        "best_checkpoint": str(out / "best.ckpt"),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


# ---------------------------------------------------------------------------
# Grid sweep
# ---------------------------------------------------------------------------

def run_sweep(cfg: RunConfig, gammas: list[float], taus: list[float],
              quiet: bool = False) -> list[dict]:
    """Train one run per (gamma, tau) cell with a shared seed and data order;
    writes per-cell artifacts plus a summary CSV. Cell failures are recorded
    and the sweep continues."""
    if cfg.optimizer != BOP:
        raise ValueError("sweep requires optimizer=bop")
    if not gammas or not taus:
        raise ValueError("sweep grid is empty")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for gamma in gammas:
        for tau in taus:
            cell = dataclasses.replace(
                cfg,
                bop=BopConfig(gamma=Schedule.constant(gamma), tau=Schedule.constant(tau)),
                output_dir=str(out / f"gamma{gamma:g}_tau{tau:g}"),
            )
            row = {"gamma": gamma, "tau": tau}
            try:
                res = run_training(cell, quiet=quiet)
                row.update(final_train_accuracy=res["final_train_accuracy"],
                           final_val_accuracy=res["final_val_accuracy"],
                           mean_pi=res["mean_pi"])
            except Exception as e:           # record and continue
                row["error"] = f"{type(e).__name__}: {e}"
            rows.append(row)
            if not quiet:
                print(f"cell gamma={gamma:g} tau={tau:g}: "
                      + (row.get("error") or f"mean_pi={row['mean_pi']:.3f} "
                                             f"val={row['final_val_accuracy']:.4f}"))
    fields = ["gamma", "tau", "final_train_accuracy", "final_val_accuracy",
              "mean_pi", "error"]
    with open(out / "sweep_summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    return rows
