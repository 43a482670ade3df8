"""Flip-rate metric, run/flip logging (line-delimited JSON), CSV export,
and the latent-weight evaluation experiment."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from . import nn
from .latent import LatentState

# additive guard inside the log; the number e raised to -9
LOG_GUARD = math.exp(-9.0)


def pi_metric(flipped: int, total: int) -> float:
    """Log flip rate: ln(flipped/total + e^-9).

    The additive constant keeps the zero-flip case finite at exactly -9.
    """
    if total <= 0:
        raise ValueError("total must be > 0")
    if not 0 <= flipped <= total:
        raise ValueError(f"flipped={flipped} outside [0, {total}]")
    return math.log(flipped / total + LOG_GUARD)


def flip_count_latent(prev_bin: np.ndarray, next_bin: np.ndarray) -> int:
    """Number of sign disagreements between two {-1,+1} tensors."""
    prev_bin = np.asarray(prev_bin)
    next_bin = np.asarray(next_bin)
    if prev_bin.shape != next_bin.shape:
        raise nn.ShapeError(f"shape {prev_bin.shape} != {next_bin.shape}")
    for name, t in (("prev", prev_bin), ("next", next_bin)):
        if not np.all(np.abs(t) == 1.0):
            raise ValueError(f"{name} tensor is not +-1 valued")
    return int((prev_bin != next_bin).sum())


# ---------------------------------------------------------------------------
# Append-only JSONL logs
# ---------------------------------------------------------------------------

class JsonlWriter:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        self._fh.flush()
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class FlipLogger(JsonlWriter):
    """Per-step flip records for one layer: {step, flipped_count,
    total_weights, pi}."""

    def __init__(self, path, total_weights: int):
        super().__init__(path)
        self.total_weights = total_weights
        self._pi_sum = 0.0
        self._n = 0

    def log(self, step: int, flipped_count: int) -> float:
        pi = pi_metric(flipped_count, self.total_weights)
        self.write({"step": step, "flipped_count": int(flipped_count),
                    "total_weights": self.total_weights, "pi": pi})
        self._pi_sum += pi
        self._n += 1
        return pi

    @property
    def mean_pi(self) -> float:
        return self._pi_sum / self._n if self._n else float("nan")


class RunLogger(JsonlWriter):
    """Per-epoch records: accuracy, loss, and current schedule values."""

    def log(self, epoch: int, train_accuracy: float, val_accuracy: float,
            loss: float, **schedule_values) -> None:
        rec = {"epoch": int(epoch), "train_accuracy": float(train_accuracy),
               "val_accuracy": float(val_accuracy), "loss": float(loss)}
        rec.update({k: float(v) for k, v in schedule_values.items()})
        self.write(rec)


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def jsonl_to_csv(jsonl_path, csv_path) -> None:
    """Convert a JSONL log to RFC-4180 CSV; header is the union of keys in
    first-seen order."""
    records = read_jsonl(jsonl_path)
    if not records:
        raise ValueError(f"no records in {jsonl_path}")
    fields: list[str] = []
    for rec in records:
        for k in rec:
            if k not in fields:
                fields.append(k)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(records)


# ---------------------------------------------------------------------------
# Latent-weight evaluation
# ---------------------------------------------------------------------------

def latent_eval_experiment(model: nn.ModelSpec, params: list,
                           latents: dict[int, LatentState],
                           train_x, train_y, val_x, val_y,
                           retrain_bn: bool = False) -> dict:
    """Evaluate a trained model twice: with sign-binarized weights and with
    the raw latent weights in the binary slots (activations stay binarized
    either way). With retrain_bn, batch-norm running stats are recomputed
    over the training set before the latent-weight evaluation.

    Returns the four accuracies plus the retrain flag.
    """
    bin_idx = model.binary_layer_indices()
    if not bin_idx:
        raise ValueError("model has no binary weight layer")
    for i in bin_idx:
        if i not in latents or latents[i].w is None:
            raise ValueError(f"missing latent state for layer {i}")

    def clone(ps):
        return [{k: np.copy(v) for k, v in p.items()} for p in ps]

    bin_params = clone(params)
    for i in bin_idx:
        bin_params[i]["w"] = nn.sign_binarize(latents[i].w)
    acc_bin_train, _ = nn.evaluate(model, bin_params, train_x, train_y)
    acc_bin_val, _ = nn.evaluate(model, bin_params, val_x, val_y)

    lat_params = clone(params)
    for i in bin_idx:
        lat_params[i]["w"] = np.copy(latents[i].w)
    if retrain_bn:
        nn.batchnorm_refresh(model, lat_params, train_x)
    acc_lat_train, _ = nn.evaluate(model, lat_params, train_x, train_y)
    acc_lat_val, _ = nn.evaluate(model, lat_params, val_x, val_y)

    return {"acc_binary_train": acc_bin_train, "acc_binary_val": acc_bin_val,
            "acc_latent_train": acc_lat_train, "acc_latent_val": acc_lat_val,
            "retrain_bn": bool(retrain_bn)}
