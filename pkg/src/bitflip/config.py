"""JSON run configuration: dataset/model refs, one optimizer block (bop or a
latent variant), schedules, and reproducibility seeds.

Layout mirrors the wire format: "optimizer" is a string and its
hyperparameters sit beside it, e.g.

    {"optimizer": "bop", "gamma": {"kind": "step_decay", ...}, "tau": 1e-8, ...}
    {"optimizer": "adam", "lr": 1e-3, "clip": 1.0, "pseudo_grad": "identity_ste", ...}
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import data as datamod
from . import nn
from .bop import BopConfig, Schedule
from .latent import ADAM, GLOROT, GLOROT_SCALED, LatentOptimizerConfig, VARIANTS


class ConfigError(ValueError):
    """Invalid run config; message names the offending field."""


BOP = "bop"
OPTIMIZERS = (BOP,) + VARIANTS

_COMMON_KEYS = {"dataset", "data_dir", "model", "optimizer", "bn_optimizer",
                "epochs", "batch_size", "seed", "output_dir", "init", "augment",
                "eval_train_samples"}
_BOP_KEYS = {"gamma", "tau"}
_LATENT_KEYS = {"lr", "lr_schedule", "clip", "pseudo_grad", "beta", "beta1",
                "beta2", "epsilon", "weight_decay"}


@dataclass
class BnOptimizerConfig:
    """Adam settings for the real-valued variables (batch norm, real layers)."""

    lr: Schedule = field(default_factory=lambda: Schedule.step_decay(1e-2, 0.1, 100))
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7


@dataclass
class RunConfig:
    dataset: str
    model: nn.ModelSpec
    optimizer: str
    seed: int
    output_dir: str
    data_dir: Optional[str] = None
    bop: Optional[BopConfig] = None
    latent: Optional[LatentOptimizerConfig] = None
    lr_schedule: Optional[Schedule] = None
    bn: BnOptimizerConfig = field(default_factory=BnOptimizerConfig)
    epochs: int = 20
    batch_size: int = 50
    init_scheme: str = GLOROT
    init_scale: float = 1.0
    augment: Optional[datamod.AugmentSpec] = None
    eval_train_samples: int = 10000

    def resolve_data_dir(self) -> str:
        d = self.data_dir or os.environ.get("BITFLIP_DATA_DIR")
        if not d and not self.dataset.startswith("synth:"):
            raise ConfigError("data_dir: not set and BITFLIP_DATA_DIR is empty")
        return d

    def to_dict(self) -> dict:
        out = {
            "dataset": self.dataset,
            "model": self.model.to_json_dict(),
            "optimizer": self.optimizer,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "bn_optimizer": {"lr": self.bn.lr.to_json_dict(), "beta1": self.bn.beta1,
                             "beta2": self.bn.beta2, "epsilon": self.bn.epsilon},
            "init": {"scheme": self.init_scheme, "scale": self.init_scale},
            "eval_train_samples": self.eval_train_samples,
        }
        if self.data_dir is not None:
            out["data_dir"] = self.data_dir
        if self.optimizer == BOP:
            out["gamma"] = self.bop.gamma.to_json_dict()
            out["tau"] = self.bop.tau.to_json_dict()
        else:
            lat = self.latent
            out["lr"] = lat.lr
            out["lr_schedule"] = self.lr_schedule.to_json_dict()
            out["clip"] = lat.clip
            out["pseudo_grad"] = lat.pseudo_grad
            out["weight_decay"] = lat.weight_decay
            if self.optimizer == "momentum":
                out["beta"] = lat.beta
            if self.optimizer == ADAM:
                out["beta1"] = lat.beta1
                out["beta2"] = lat.beta2
                out["epsilon"] = lat.epsilon
        if self.augment is not None:
            out["augment"] = {"pad": self.augment.pad, "crop": self.augment.crop,
                              "hflip": self.augment.hflip}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Model presets
# ---------------------------------------------------------------------------

def _mnist_mlp() -> nn.ModelSpec:
    # real first/last, one binarized hidden layer: 784-256-256-10
    return nn.ModelSpec(layers=[
        nn.RealDense(784, 256),
        nn.BatchNorm(256),
        nn.BinaryActivation(),
        nn.BinaryDense(256, 256),
        nn.BatchNorm(256),
        nn.BinaryActivation(),
        nn.RealDense(256, 10),
    ])


def _mnist_mlp_small() -> nn.ModelSpec:
    # binarized hidden weights: 784-128-10
    return nn.ModelSpec(layers=[
        nn.BinaryDense(784, 128),
        nn.BatchNorm(128),
        nn.BinaryActivation(),
        nn.RealDense(128, 10),
    ])


def _mnist_mlp_binary() -> nn.ModelSpec:
    # fully binarized 784-256-256-10 (inputs sign-binarized); the
    # binary-dominated benchmark target
    return nn.ModelSpec(layers=[
        nn.BinaryActivation(),
        nn.BinaryDense(784, 256),
        nn.BatchNorm(256),
        nn.BinaryActivation(),
        nn.BinaryDense(256, 256),
        nn.BatchNorm(256),
        nn.BinaryActivation(),
        nn.BinaryDense(256, 10),
        nn.BatchNorm(10),
    ])


def _cifar_vgg_small() -> nn.ModelSpec:
    # small VGG-style stack; downsampling via stride-2 binary convs (the
    # layer set has no pooling), widths trimmed for desk-scale runs
    return nn.ModelSpec(layers=[
        nn.BinaryConv2D(3, 64, 3, 3, stride=1, pad=1),
        nn.BatchNorm(64),
        nn.BinaryActivation(),
        nn.BinaryConv2D(64, 64, 3, 3, stride=2, pad=1),
        nn.BatchNorm(64),
        nn.BinaryActivation(),
        nn.BinaryConv2D(64, 128, 3, 3, stride=1, pad=1),
        nn.BatchNorm(128),
        nn.BinaryActivation(),
        nn.BinaryConv2D(128, 128, 3, 3, stride=2, pad=1),
        nn.BatchNorm(128),
        nn.BinaryActivation(),
        nn.BinaryDense(128 * 8 * 8, 512),
        nn.BatchNorm(512),
        nn.BinaryActivation(),
        nn.RealDense(512, 10),
    ])


MODEL_PRESETS = {
    "mnist_mlp": _mnist_mlp,
    "mnist_mlp_small": _mnist_mlp_small,
    "mnist_mlp_binary": _mnist_mlp_binary,
    "cifar_vgg_small": _cifar_vgg_small,
}


def resolve_model(ref) -> nn.ModelSpec:
    """Inline dict, preset name, or path to a model JSON file."""
    if isinstance(ref, dict):
        return nn.ModelSpec.from_json_dict(ref)
    if isinstance(ref, str):
        if ref in MODEL_PRESETS:
            return MODEL_PRESETS[ref]()
        path = Path(ref)
        if path.exists():
            return nn.ModelSpec.from_json(path.read_text())
        raise ConfigError(f"model: unknown preset or missing file {ref!r}")
    raise ConfigError(f"model: expected object, preset name, or path, got {type(ref).__name__}")


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _schedule(d, where: str) -> Schedule:
    try:
        return Schedule.from_json(d)
    except (ValueError, KeyError, TypeError) as e:
        raise ConfigError(f"{where}: {e}") from None


def parse_config(source) -> RunConfig:
    """Parse a config from a dict, JSON string, or file path."""
    if isinstance(source, (str, Path)):
        path = Path(source)
        try:
            text = path.read_text() if path.exists() else str(source)
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}")
    elif isinstance(source, dict):
        raw = source
    else:
        raise ConfigError(f"config must be a dict or path, got {type(source).__name__}")

    for key in ("dataset", "model", "optimizer", "seed", "output_dir"):
        if key not in raw:
            raise ConfigError(f"{key}: required field missing")
    optimizer = raw["optimizer"]
    if optimizer not in OPTIMIZERS:
        raise ConfigError(f"optimizer: expected one of {OPTIMIZERS}, got {optimizer!r}")

    allowed = _COMMON_KEYS | (_BOP_KEYS if optimizer == BOP else _LATENT_KEYS)
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"{key}: not a valid field for optimizer={optimizer!r}")

    cfg = RunConfig(
        dataset=str(raw["dataset"]),
        model=resolve_model(raw["model"]),
        optimizer=optimizer,
        seed=int(raw["seed"]),
        output_dir=str(raw["output_dir"]),
        data_dir=raw.get("data_dir"),
        epochs=int(raw.get("epochs", 20)),
        batch_size=int(raw.get("batch_size", 50)),
        eval_train_samples=int(raw.get("eval_train_samples", 10000)),
    )
    if cfg.epochs <= 0:
        raise ConfigError("epochs: must be > 0")
    if cfg.batch_size <= 0:
        raise ConfigError("batch_size: must be > 0")

    if optimizer == BOP:
        cfg.bop = BopConfig(
            gamma=_schedule(raw.get("gamma", {"kind": "step_decay", "value": 1e-4}), "gamma"),
            tau=_schedule(raw.get("tau", 1e-8), "tau"),
        )
        for sched, name, low in ((cfg.bop.gamma, "gamma", True), (cfg.bop.tau, "tau", False)):
            v0 = sched.value if sched.kind != "linear" else min(sched.start, sched.end)
            if low and not 0 < v0 <= 1:
                raise ConfigError(f"{name}: values must lie in (0, 1]")
            if not low and v0 < 0:
                raise ConfigError(f"{name}: values must be >= 0")
    else:
        lat = LatentOptimizerConfig(
            variant=optimizer,
            lr=float(raw.get("lr", 1e-3)),
            beta=float(raw.get("beta", 0.9)),
            beta1=float(raw.get("beta1", 0.9)),
            beta2=float(raw.get("beta2", 0.999)),
            epsilon=float(raw.get("epsilon", 1e-7)),
            clip=None if raw.get("clip", 1.0) is None else float(raw.get("clip", 1.0)),
            pseudo_grad=raw.get("pseudo_grad", nn.IDENTITY_STE),
            weight_decay=float(raw.get("weight_decay", 0.0)),
        )
        try:
            lat.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        cfg.latent = lat
        cfg.lr_schedule = (_schedule(raw["lr_schedule"], "lr_schedule")
                           if "lr_schedule" in raw else Schedule.constant(lat.lr))

    bn_raw = raw.get("bn_optimizer", {})
    if not isinstance(bn_raw, dict):
        raise ConfigError("bn_optimizer: expected an object")
    cfg.bn = BnOptimizerConfig(
        lr=(_schedule(bn_raw["lr"], "bn_optimizer.lr") if "lr" in bn_raw
            else BnOptimizerConfig().lr),
        beta1=float(bn_raw.get("beta1", 0.9)),
        beta2=float(bn_raw.get("beta2", 0.999)),
        epsilon=float(bn_raw.get("epsilon", 1e-7)),
    )

    init_raw = raw.get("init", {})
    cfg.init_scheme = init_raw.get("scheme", GLOROT)
    cfg.init_scale = float(init_raw.get("scale", 1.0))
    if cfg.init_scheme not in (GLOROT, GLOROT_SCALED):
        raise ConfigError(f"init.scheme: unknown scheme {cfg.init_scheme!r}")
    if cfg.init_scale <= 0:
        raise ConfigError("init.scale: must be > 0")

    aug_raw = raw.get("augment")
    if aug_raw is not None:
        cfg.augment = datamod.AugmentSpec(pad=int(aug_raw.get("pad", 4)),
                                          crop=int(aug_raw.get("crop", 32)),
                                          hflip=float(aug_raw.get("hflip", 0.5)))

    return cfg


def load_dataset(cfg: RunConfig) -> tuple[datamod.DatasetHandle, datamod.DatasetHandle]:
    """Resolve the config's dataset ref to (train, test) handles."""
    name = cfg.dataset
    if name == "mnist":
        return datamod.load_mnist(cfg.resolve_data_dir())
    if name == "cifar10":
        return datamod.load_cifar10(cfg.resolve_data_dir())
    if name.startswith("synth:"):
        kind = name.split(":", 1)[1]
        full = datamod.synthetic_task(kind, n=2500, seed=cfg.seed)
        n_train = 2000
        train = datamod.DatasetHandle(datamod.TRAIN, full.x[:n_train], full.y[:n_train],
                                      full.num_classes)
        test = datamod.DatasetHandle(datamod.TEST, full.x[n_train:], full.y[n_train:],
                                     full.num_classes)
        return train, test
    raise ConfigError(f"dataset: unknown dataset {name!r}")
