"""Exact evaluators computed from the world model.

Every evaluator, oracle or learned, exposes ``evaluate(x, t, cond)`` returning
one score per latent, oriented so that greater is better.
"""

from __future__ import annotations

import numpy as np

from .._validation import as_latents
from ..diffusion import NoiseSchedule
from ..world import MixtureWorld


class AlignmentOracle:
    """log p(cond | x_t) under the noised world model."""

    kind = "alignment-oracle"
    requires_condition = True

    def __init__(self, world: MixtureWorld, sched: NoiseSchedule):
        self.world = world
        self.sched = sched

    def evaluate(self, x, t, cond) -> np.ndarray:
        x = as_latents(x, self.world.d)
        return self.world.log_class_posterior(x, t, cond, self.sched)

    @property
    def multiply_adds(self) -> int:
        return mixture_multiply_adds(self.world, gradient=False)

    def __repr__(self):
        return f"AlignmentOracle(world={self.world.name!r})"


class QualityOracle:
    """Log density of the noised marginal: how plausible x_t is as real data at time t."""

    kind = "quality-oracle"
    requires_condition = False

    def __init__(self, world: MixtureWorld, sched: NoiseSchedule):
        self.world = world
        self.sched = sched

    def evaluate(self, x, t, cond=None) -> np.ndarray:
        x = as_latents(x, self.world.d)
        return self.world.log_density(x, t, None, self.sched)

    @property
    def multiply_adds(self) -> int:
        return mixture_multiply_adds(self.world, gradient=False)

    def __repr__(self):
        return f"QualityOracle(world={self.world.name!r})"


class ConstantEvaluator:
    """Returns the same score everywhere; used to exercise tie-breaking."""

    kind = "constant"
    requires_condition = False
    multiply_adds = 0

    def __init__(self, value: float = 0.0):
        self.value = float(value)

    def evaluate(self, x, t, cond=None) -> np.ndarray:
        return np.full(as_latents(x).shape[0], self.value)


def mixture_multiply_adds(world: MixtureWorld, gradient: bool = True) -> int:
    """Static multiply-add count for one latent through the component pass.

    Per component: centring (d), eigenbasis rotation (d^2), scaled quadratic
    form (2d), and for the gradient a back-rotation (d^2) plus the
    responsibility-weighted accumulation (d).
    """
    d = world.d
    per = d + d * d + 2 * d
    if gradient:
        per += d * d + d
    return world.n_components * per
