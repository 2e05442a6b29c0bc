"""Sample-quality metrics: Frechet-Gaussian distance, alignment, win rates, bootstrap CIs."""

from __future__ import annotations

import numpy as np

from .._validation import ContractError, as_conditions

REG = 1e-6


def _as_samples(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ContractError(f"samples must be 1-D or 2-D, got shape {x.shape}")
    return x


def moments(samples) -> tuple[np.ndarray, np.ndarray]:
    x = _as_samples(samples)
    mu = x.mean(axis=0)
    c = x - mu
    return mu, c.T @ c / (x.shape[0] - 1)


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> tuple[float, bool]:
    """Squared 2-Wasserstein distance between Gaussians; returns (value, regularized)."""
    regularized = False
    d = mu_a.shape[0]
    covs = []
    for c in (cov_a, cov_b):
        if np.linalg.eigvalsh(c).min() <= 1e-12 * max(1.0, np.trace(c)):
            c = c + REG * np.eye(d)
            regularized = True
        covs.append(c)
    cov_a, cov_b = covs
    ra = _sqrt_psd(cov_a)
    cross = np.linalg.eigvalsh(ra @ cov_b @ ra)
    tr_cross = np.sum(np.sqrt(np.clip(cross, 0.0, None)))
    diff = mu_a - mu_b
    val = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_cross)
    return max(val, 0.0), regularized


def frechet_gaussian(samples_a, samples_b, return_flag: bool = False):
    """Frechet distance between Gaussians fitted to two sample sets."""
    a, b = _as_samples(samples_a), _as_samples(samples_b)
    if a.shape[1] != b.shape[1]:
        raise ContractError("sample sets differ in dimension")
    d = a.shape[1]
    if a.shape[0] < d + 1 or b.shape[0] < d + 1:
        raise ContractError(f"need at least {d + 1} samples per set")
    val, flag = frechet_from_moments(*moments(a), *moments(b))
    return (val, flag) if return_flag else val


def class_frechet(samples, conds, reference: dict) -> float:
    """Mean over classes of the distance between a class's samples and its reference moments.

    ``reference`` maps class -> (mean, cov).
    """
    conds = np.asarray(conds)
    vals = []
    for c, (mu_r, cov_r) in sorted(reference.items()):
        sel = samples[conds == c]
        if sel.shape[0] < samples.shape[1] + 1:
            continue
        vals.append(frechet_from_moments(*moments(sel), mu_r, cov_r)[0])
    if not vals:
        raise ContractError("no class has enough samples for a distance")
    return float(np.mean(vals))


def reference_moments(world, n: int, seed: int) -> dict:
    """Moments of ``n`` ground-truth draws per class."""
    out = {}
    for c in range(world.n_classes):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(1_000_003, c)))
        out[c] = moments(world.sample(c, n, rng))
    return out


def target_posteriors(samples, conds, world) -> np.ndarray:
    """Per-sample p(target class | x_0)."""
    if world.n_classes == 1:
        return np.ones(np.asarray(samples).shape[0])
    return np.exp(world.clean_log_class_posterior(samples, conds))


def alignment_metric(samples, cond, world) -> float:
    """Mean posterior probability of the target class at t = 0."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    return float(np.mean(target_posteriors(samples, cond, world)))


def bootstrap_ci(values, n_boot: int = 1000, seed: int = 0, level: float = 0.95, stat=np.mean):
    """Percentile bootstrap interval of ``stat`` over the first axis."""
    values = np.asarray(values)
    rng = np.random.default_rng(seed)
    n = values.shape[0]
    idx = rng.integers(0, n, size=(n_boot, n))
    boots = np.array([stat(values[i]) for i in idx])
    a = (1.0 - level) / 2.0
    return float(np.quantile(boots, a)), float(np.quantile(boots, 1.0 - a))


def bootstrap_frechet_diff(samples_a, samples_b, conds, reference, n_boot=1000, seed=0, level=0.95):
    """Paired bootstrap of class_frechet(a) - class_frechet(b) over shared cells."""
    conds = np.asarray(conds)
    rng = np.random.default_rng(seed)
    n = conds.shape[0]
    diffs = np.empty(n_boot)
    for k in range(n_boot):
        i = rng.integers(0, n, size=n)
        diffs[k] = class_frechet(samples_a[i], conds[i], reference) - class_frechet(samples_b[i], conds[i], reference)
    a = (1.0 - level) / 2.0
    point = class_frechet(samples_a, conds, reference) - class_frechet(samples_b, conds, reference)
    return point, (float(np.quantile(diffs, a)), float(np.quantile(diffs, 1.0 - a)))


def win_rate(samples_a, samples_b, judge, conds, tol: float = 1e-9, n_boot: int = 1000, seed: int = 0):
    """Fraction of paired comparisons won by ``a`` under ``judge`` (ties count half).

    ``judge`` is an evaluator scored at t = 0.  Returns (rate, (lo, hi)).
    """
    a = np.atleast_2d(np.asarray(samples_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(samples_b, dtype=np.float64))
    if a.shape != b.shape:
        raise ContractError("win_rate needs paired samples of equal shape")
    conds = np.asarray(conds).reshape(-1)
    if conds.shape[0] != a.shape[0]:
        raise ContractError("one condition per pair is required")
    cond = conds if getattr(judge, "requires_condition", False) else None
    sa = np.asarray(judge.evaluate(a, 0, cond))
    sb = np.asarray(judge.evaluate(b, 0, cond))
    # half-unit integer counts keep win_rate(a, b) + win_rate(b, a) == 1 exactly
    half = np.where(np.abs(sa - sb) <= tol, 1, np.where(sa > sb, 2, 0))
    n2 = 2 * half.shape[0]
    rate = int(half.sum()) / n2
    lo, hi = bootstrap_ci(half / 2.0, n_boot=n_boot, seed=seed)
    return rate, (lo, hi)


def per_class_conditions(conds, world):
    return as_conditions(conds, np.asarray(conds).shape[0], world.n_classes, allow_null=False)
