"""Time-dependent loss weights for fine-grained evaluators.

High-noise timesteps carry almost no signal for fine-grained properties, so
their loss gets a small floor weight.  Below the cutoff (the lowest third of
the timestep range) the weight ramps up to 1 at ``t_min``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .._validation import ContractError

FLOOR = 0.05


@dataclass(frozen=True)
class LossWeightSchedule:
    t_min: float
    t_max: float
    k: float = 5.0
    ramp: str = "exponential"

    def __post_init__(self):
        if not self.t_max > self.t_min:
            raise ContractError("t_max must exceed t_min")
        if self.ramp not in ("exponential", "linear"):
            raise ContractError(f"unknown ramp {self.ramp!r}")
        if self.ramp == "exponential" and self.k <= 0:
            raise ContractError("sharpness k must be positive")

    @property
    def t_cut(self) -> float:
        return self.t_min + (self.t_max - self.t_min) / 3.0

    def __call__(self, t):
        return loss_weight(self, t)


def loss_weight(ls: LossWeightSchedule, t):
    """Weight at timestep(s) ``t``; scalar in, float out."""
    arr = np.asarray(t, dtype=np.float64)
    if np.any(arr < ls.t_min) or np.any(arr > ls.t_max):
        raise ContractError(f"timestep outside [{ls.t_min}, {ls.t_max}]")
    u = np.clip((ls.t_cut - arr) / (ls.t_cut - ls.t_min), 0.0, 1.0)
    if ls.ramp == "linear":
        frac = u
    else:
        frac = np.expm1(ls.k * u) / math.expm1(ls.k)
    w = np.where(arr > ls.t_cut, FLOOR, FLOOR + (1.0 - FLOOR) * frac)
    return float(w) if w.ndim == 0 else w
