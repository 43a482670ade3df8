"""bop: gradient-EMA flip optimizer for binary weights.

The optimizer owns the sign vector directly; the only real-valued state is
one exponential moving average of gradients per weight. A weight flips when
that average is strong (|m| above the threshold tau) and agrees in sign with
the weight, i.e. when a consistent gradient pushes against the current sign.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn

RANDOM_SIGN = "random_sign"
FROM_SIGNS = "from_signs"

CONSTANT = "constant"
STEP_DECAY = "step_decay"
LINEAR = "linear"


@dataclass
class Schedule:
    """Hyperparameter schedule over optimizer steps.

    constant: value forever. step_decay: value * factor^(epoch // every).
    linear: start -> end over total_steps, clamped at end afterwards.
    """

    kind: str = CONSTANT
    value: float = 0.0          # constant / step_decay initial value
    factor: float = 0.1         # step_decay
    every_epochs: int = 100     # step_decay
    start: float = 0.0          # linear
    end: float = 0.0            # linear
    total_steps: int = 1        # linear

    @classmethod
    def constant(cls, v: float) -> "Schedule":
        return cls(kind=CONSTANT, value=v)

    @classmethod
    def step_decay(cls, v0: float, factor: float, every_epochs: int) -> "Schedule":
        return cls(kind=STEP_DECAY, value=v0, factor=factor, every_epochs=every_epochs)

    @classmethod
    def linear(cls, start: float, end: float, total_steps: int) -> "Schedule":
        return cls(kind=LINEAR, start=start, end=end, total_steps=total_steps)

    def to_json_dict(self) -> dict:
        if self.kind == CONSTANT:
            return {"kind": CONSTANT, "value": self.value}
        if self.kind == STEP_DECAY:
            return {"kind": STEP_DECAY, "value": self.value, "factor": self.factor,
                    "every_epochs": self.every_epochs}
        return {"kind": LINEAR, "start": self.start, "end": self.end,
                "total_steps": self.total_steps}

    @classmethod
    def from_json(cls, d) -> "Schedule":
        if isinstance(d, (int, float)):
            return cls.constant(float(d))
        if not isinstance(d, dict):
            raise ValueError(f"schedule must be a number or object, got {type(d).__name__}")
        kind = d.get("kind", CONSTANT)
        if kind == CONSTANT:
            return cls.constant(float(d["value"]))
        if kind == STEP_DECAY:
            return cls.step_decay(float(d["value"]), float(d.get("factor", 0.1)),
                                  int(d.get("every_epochs", 100)))
        if kind == LINEAR:
            total = int(d["total_steps"])
            if total < 1:
                raise ValueError("linear schedule needs total_steps >= 1")
            return cls.linear(float(d["start"]), float(d["end"]), total)
        raise ValueError(f"unknown schedule kind {kind!r}")


def schedule_value(s: Schedule, step: int, steps_per_epoch: int) -> float:
    """Schedule value at a given optimizer step (step counts from 0)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if s.kind == CONSTANT:
        return s.value
    if s.kind == STEP_DECAY:
        epoch = step // steps_per_epoch
        return s.value * s.factor ** (epoch // s.every_epochs)
    if s.kind == LINEAR:
        frac = min(step / s.total_steps, 1.0)
        return s.start + (s.end - s.start) * frac
    raise ValueError(f"unknown schedule kind {s.kind!r}")


@dataclass
class BopConfig:
    """gamma: EMA adaptivity rate in (0,1]; tau: flip threshold >= 0."""

    gamma: Schedule = field(default_factory=lambda: Schedule.step_decay(1e-4, 0.1, 100))
    tau: Schedule = field(default_factory=lambda: Schedule.constant(1e-8))


@dataclass
class BopState:
    """Sign vector plus its gradient EMA; exactly one real slot per weight."""

    w: np.ndarray
    m: np.ndarray
    t: int = 0


def bop_init(shape: tuple, seed: Optional[int] = None,
             w0: Optional[np.ndarray] = None,
             m0: Optional[np.ndarray] = None) -> BopState:
    """Fresh state: signs from a Glorot draw (seed) or given outright (w0);
    EMA starts at zero unless m0 is supplied."""
    shape = tuple(shape)
    if w0 is not None:
        w0 = np.asarray(w0, dtype=np.float64)
        if w0.shape != shape:
            raise nn.ShapeError(f"w0 shape {w0.shape} != {shape}")
        if not np.all(np.abs(w0) == 1.0):
            bad = np.argwhere(np.abs(w0) != 1.0)[0]
            raise ValueError(f"w0 element at {tuple(bad)} is not +-1")
        w = w0.copy()
    else:
        if seed is None:
            raise ValueError("bop_init needs a seed or explicit signs")
        rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
        w = nn.sign_binarize(nn.glorot_uniform(shape, rng))
    if m0 is None:
        m = np.zeros(shape)
    else:
        m = np.asarray(m0, dtype=np.float64)
        if m.shape != shape:
            raise nn.ShapeError(f"m0 shape {m.shape} != {shape}")
        m = m.copy()
    return BopState(w=w, m=m)


def ema_update(m: np.ndarray, g: np.ndarray, gamma: float) -> np.ndarray:
    """(1 - gamma) * m + gamma * g, elementwise."""
    m = np.asarray(m, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if m.shape != g.shape:
        raise nn.ShapeError(f"EMA shape {m.shape} != gradient shape {g.shape}")
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite gradient")
    return (1.0 - gamma) * m + gamma * g


def flip_step(state: BopState, g: np.ndarray, gamma: float, tau: float) -> np.ndarray:
    """Fold the gradient into the EMA, then flip every weight whose EMA is
    strictly above tau in magnitude and agrees with the weight's sign.

    Mutates `state` (untouched on validation error) and returns the flat
    indices of flipped weights.
    """
    if tau < 0:
        raise ValueError("tau must be >= 0")
    m = ema_update(state.m, g, gamma)   # validates shape / gamma / finiteness
    flip = (np.abs(m) > tau) & (np.sign(m) == np.sign(state.w))
    state.m = m
    state.w = np.where(flip, -state.w, state.w)
    state.t += 1
    return np.flatnonzero(flip)
