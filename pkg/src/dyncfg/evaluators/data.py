"""Synthetic training sets for the learned evaluators, drawn from a world model."""

from __future__ import annotations

import numpy as np

from .learned import nearest_mean_oracle


def preference_pairs(world, n: int, rng, spread: float = 1.0):
    """Pairs of clean latents ordered by the alignment margin for a shared condition.

    Both members are marginal draws blurred by isotropic noise of std
    ``spread``; the one with the higher clean log posterior of the condition
    is preferred.
    """
    conds = rng.integers(0, world.n_classes, size=n)
    a = _blurred(world, world.sample_labeled(n, rng)[1], rng, spread)
    b = _blurred(world, world.sample_labeled(n, rng)[1], rng, spread)
    a_wins = world.clean_log_class_posterior(a, conds) >= world.clean_log_class_posterior(b, conds)
    pref = np.where(a_wins[:, None], a, b)
    rej = np.where(a_wins[:, None], b, a)
    return pref, rej, conds


def _blurred(world, conds, rng, spread):
    x = np.empty((conds.shape[0], world.d))
    for c in range(world.n_classes):
        sel = conds == c
        x[sel] = world.sample(c, int(sel.sum()), rng)
    return x + spread * rng.standard_normal(x.shape)


def training_set(kind: str, world, n: int, rng, spread: float = 1.0):
    """Positional ``fit`` arguments for an evaluator of ``kind``."""
    if kind == "alignment-learned":
        return world.sample_labeled(n, rng)
    if kind == "reward-learned":
        return preference_pairs(world, n, rng, spread)
    if kind == "discriminator-learned":
        real, conds = world.sample_labeled(n, rng)
        fake = _blurred(world, conds, rng, spread)
        return real, fake
    if kind == "capability-learned":
        conds = rng.integers(0, world.n_classes, size=n)
        x = _blurred(world, conds, rng, spread)
        return x, conds, nearest_mean_oracle(world, x, conds)
    raise ValueError(f"unknown learned evaluator kind {kind!r}")
