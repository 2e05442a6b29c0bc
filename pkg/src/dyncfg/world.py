"""Class-conditional Gaussian mixtures with closed-form noisy scores.

The forward process maps a component N(mu, S) to
N(sqrt(ab) mu, ab S + (1 - ab) I), so every noisy marginal is again a
mixture and its score is a responsibility-weighted sum of Gaussian scores.
That makes the exact conditional and unconditional noise predictions
available without training anything.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ._validation import ContractError, as_conditions, as_latents, as_timesteps
from .diffusion import NoiseSchedule

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class ClassMixture:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        cov = np.asarray(self.covs, dtype=np.float64)
        if cov.ndim == 2:
            cov = np.broadcast_to(cov, (mu.shape[0],) + cov.shape).copy()
        if w.shape[0] != mu.shape[0] or cov.shape[:1] != mu.shape[:1]:
            raise ContractError("weights, means and covariances disagree on component count")
        if cov.shape[1:] != (mu.shape[1], mu.shape[1]):
            raise ContractError(f"covariance shape {cov.shape[1:]} does not match dimension {mu.shape[1]}")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ContractError("component weights must be positive and sum to 1")
        for k, c in enumerate(cov):
            if not np.allclose(c, c.T, rtol=0, atol=1e-12):
                raise ContractError(f"covariance {k} is not symmetric")
            if np.linalg.eigvalsh(c).min() <= 0:
                raise ContractError(f"covariance {k} is not positive definite")
        for name, arr in (("weights", w), ("means", mu), ("covs", cov)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


@dataclass(frozen=True, eq=False)
class MixtureWorld:
    """Class-conditional Gaussian mixture; the unconditional law is the prior-weighted union."""

    classes: tuple
    priors: np.ndarray
    name: str = "custom"
    _flat: dict = field(init=False, repr=False)

    def __post_init__(self):
        classes = tuple(
            c if isinstance(c, ClassMixture) else ClassMixture(**c) for c in self.classes
        )
        if not classes:
            raise ContractError("a world needs at least one class")
        priors = np.asarray(self.priors, dtype=np.float64).reshape(-1)
        if priors.shape[0] != len(classes):
            raise ContractError("one prior per class is required")
        if np.any(priors <= 0) or abs(priors.sum() - 1.0) > 1e-12:
            raise ContractError("class priors must be positive and sum to 1")
        d = classes[0].means.shape[1]
        if any(c.means.shape[1] != d for c in classes):
            raise ContractError("all classes must share the latent dimension")
        priors.setflags(write=False)
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "priors", priors)

        means = np.concatenate([c.means for c in classes])
        covs = np.concatenate([c.covs for c in classes])
        owner = np.concatenate([np.full(len(c.weights), i) for i, c in enumerate(classes)])
        log_w = np.concatenate([np.log(c.weights) for c in classes])
        evals, evecs = np.linalg.eigh(covs)
        chol = np.linalg.cholesky(covs)
        object.__setattr__(self, "_flat", {
            "means": means,
            "owner": owner,
            "log_w": log_w,
            "log_w_marginal": log_w + np.log(priors)[owner],
            "evals": evals,
            "evecs": evecs,
            "chol": chol,
        })

    @property
    def d(self) -> int:
        return self.classes[0].means.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def n_components(self) -> int:
        return self._flat["means"].shape[0]

    # -- sampling -----------------------------------------------------------

    def sample(self, cond, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` clean latents for a class label, or from the marginal when ``cond`` is None."""
        f = self._flat
        if cond is None:
            comp = rng.choice(self.n_components, size=n, p=np.exp(f["log_w_marginal"]))
        else:
            if not 0 <= int(cond) < self.n_classes:
                raise ContractError(f"class {cond} outside [0, {self.n_classes})")
            offset = sum(len(c.weights) for c in self.classes[: int(cond)])
            w = self.classes[int(cond)].weights
            comp = offset + rng.choice(len(w), size=n, p=w)
        z = rng.standard_normal((n, self.d))
        return f["means"][comp] + np.einsum("nij,nj->ni", f["chol"][comp], z)

    def sample_labeled(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Marginal draws together with the class each came from."""
        f = self._flat
        comp = rng.choice(self.n_components, size=n, p=np.exp(f["log_w_marginal"]))
        z = rng.standard_normal((n, self.d))
        x = f["means"][comp] + np.einsum("nij,nj->ni", f["chol"][comp], z)
        return x, f["owner"][comp]

    # -- noisy-marginal quantities ------------------------------------------

    def _component_terms(self, x: np.ndarray, ab: np.ndarray, grad: bool):
        """Per-component log N(x; sqrt(ab) mu, ab S + (1-ab) I) and optionally its x-gradient."""
        f = self._flat
        ab = ab[:, None, None]
        lam = ab * f["evals"][None] + (1.0 - ab)  # (n, K, d)
        diff = x[:, None, :] - np.sqrt(ab) * f["means"][None]  # (n, K, d)
        z = np.einsum("kij,nki->nkj", f["evecs"], diff)  # rotate into eigenbasis
        logn = -0.5 * (np.sum(z * z / lam, axis=-1) + np.sum(np.log(lam), axis=-1) + self.d * _LOG_2PI)
        if not grad:
            return logn, None
        g = -np.einsum("kij,nkj->nki", f["evecs"], z / lam)
        return logn, g

    def _alpha_bars(self, t, n: int, sched: NoiseSchedule) -> np.ndarray:
        return sched.alpha_bar[as_timesteps(t, n, sched.T)]

    def _class_log_joint(self, logn: np.ndarray) -> np.ndarray:
        """(n, C) array of log pi_c + log p_t(x | c)."""
        f = self._flat
        out = np.empty((logn.shape[0], self.n_classes))
        for c in range(self.n_classes):
            sel = f["owner"] == c
            out[:, c] = np.log(self.priors[c]) + logsumexp(logn[:, sel] + f["log_w"][sel], axis=1)
        return out

    def _log_weights_for(self, conds: np.ndarray) -> np.ndarray:
        """(n, K) log mixture weights with -inf for components outside the condition."""
        f = self._flat
        lw = np.where(
            conds[:, None] < 0,
            f["log_w_marginal"][None, :],
            np.where(f["owner"][None, :] == conds[:, None], f["log_w"][None, :], -np.inf),
        )
        return lw

    def log_density(self, x, t, cond, sched: NoiseSchedule) -> np.ndarray:
        """Log density of the noised conditional (or marginal, cond=None) law at ``x``."""
        x = as_latents(x, self.d)
        conds = as_conditions(cond, x.shape[0], self.n_classes)
        logn, _ = self._component_terms(x, self._alpha_bars(t, x.shape[0], sched), grad=False)
        return logsumexp(logn + self._log_weights_for(conds), axis=1)

    def score(self, x, t, cond, sched: NoiseSchedule) -> np.ndarray:
        """Gradient of :meth:`log_density` in x."""
        x = as_latents(x, self.d)
        conds = as_conditions(cond, x.shape[0], self.n_classes)
        logn, g = self._component_terms(x, self._alpha_bars(t, x.shape[0], sched), grad=True)
        logits = logn + self._log_weights_for(conds)
        resp = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        return np.einsum("nk,nkd->nd", resp, g)

    def eps(self, x, t, cond, sched: NoiseSchedule) -> np.ndarray:
        """Exact noise prediction ``-sqrt(1 - ab_t) * score``."""
        x = as_latents(x, self.d)
        ab = self._alpha_bars(t, x.shape[0], sched)
        return -np.sqrt(1.0 - ab)[:, None] * self.score(x, t, cond, sched)

    def eps_pair(self, x, t: int, cond, sched: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
        """(unconditional, conditional) predictions sharing one component pass.

        Counts as two denoiser evaluations; the sharing is only a speed-up.
        """
        x = as_latents(x, self.d)
        n = x.shape[0]
        conds = as_conditions(cond, n, self.n_classes, allow_null=False)
        ab = self._alpha_bars(t, n, sched)
        logn, g = self._component_terms(x, ab, grad=True)
        scale = -np.sqrt(1.0 - ab)[:, None]
        out = []
        for lw in (self._log_weights_for(np.full(n, -1)), self._log_weights_for(conds)):
            logits = logn + lw
            resp = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
            out.append(scale * np.einsum("nk,nkd->nd", resp, g))
        return out[0], out[1]

    def class_posteriors(self, x, t, sched: NoiseSchedule) -> np.ndarray:
        """(n, C) Bayes posteriors p(c | x_t)."""
        x = as_latents(x, self.d)
        logn, _ = self._component_terms(x, self._alpha_bars(t, x.shape[0], sched), grad=False)
        lj = self._class_log_joint(logn)
        return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))

    def log_class_posterior(self, x, t, cond, sched: NoiseSchedule) -> np.ndarray:
        """log p(cond | x_t) per row; ``cond`` may be per-row."""
        x = as_latents(x, self.d)
        conds = as_conditions(cond, x.shape[0], self.n_classes, allow_null=False)
        logn, _ = self._component_terms(x, self._alpha_bars(t, x.shape[0], sched), grad=False)
        lj = self._class_log_joint(logn)
        return lj[np.arange(x.shape[0]), conds] - logsumexp(lj, axis=1)

    def posterior_class_prob(self, x, t, c, sched: NoiseSchedule) -> np.ndarray:
        return np.exp(self.log_class_posterior(x, t, c, sched))

    def clean_log_class_posterior(self, x, cond) -> np.ndarray:
        """log p(cond | x_0) for clean latents; no schedule needed."""
        x = as_latents(x, self.d)
        conds = as_conditions(cond, x.shape[0], self.n_classes, allow_null=False)
        logn, _ = self._component_terms(x, np.ones(x.shape[0]), grad=False)
        lj = self._class_log_joint(logn)
        return lj[np.arange(x.shape[0]), conds] - logsumexp(lj, axis=1)

    def class_moments(self, c: int) -> tuple[np.ndarray, np.ndarray]:
        """Exact mean and covariance of a clean class-conditional mixture."""
        cm = self.classes[c]
        mean = cm.weights @ cm.means
        second = np.einsum("k,kij->ij", cm.weights, cm.covs + np.einsum("ki,kj->kij", cm.means, cm.means))
        return mean, second - np.outer(mean, mean)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "priors": self.priors.tolist(),
            "classes": [
                {"weights": c.weights.tolist(), "means": c.means.tolist(), "covs": c.covs.tolist()}
                for c in self.classes
            ],
        }

    @classmethod
    def from_dict(cls, spec: dict) -> "MixtureWorld":
        return cls(
            classes=tuple(ClassMixture(**c) for c in spec["classes"]),
            priors=np.asarray(spec["priors"]),
            name=spec.get("name", "custom"),
        )


def _grid_world(x_offset: float, y_offset: float, var: float, name: str) -> MixtureWorld:
    cov = var * np.eye(2)
    classes = []
    for sign in (-1.0, 1.0):
        means = np.array([[sign * x_offset, -y_offset], [sign * x_offset, y_offset]])
        classes.append(ClassMixture(np.array([0.5, 0.5]), means, np.stack([cov, cov])))
    return MixtureWorld(tuple(classes), np.array([0.5, 0.5]), name=name)


def default_world() -> MixtureWorld:
    """Two classes, each two isotropic components (var 0.4) at x = -2 / +2, y = +-2."""
    return _grid_world(2.0, 2.0, 0.4, "default")


def hard_world() -> MixtureWorld:
    """Like the default world but with class means at x = +-0.8, so the classes overlap."""
    return _grid_world(0.8, 2.0, 0.4, "hard")


PRESETS = {"default": default_world, "hard": hard_world}


def preset(name: str) -> MixtureWorld:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ContractError(f"unknown world preset {name!r}; choose from {sorted(PRESETS)}") from None


def sample_data(world: MixtureWorld, cond, rng: np.random.Generator, n: int | None = None):
    """Draw clean data; returns a single vector when ``n`` is None."""
    if n is None:
        return world.sample(cond, 1, rng)[0]
    return world.sample(cond, n, rng)


def log_density(world, x, t, cond, sched):
    return world.log_density(x, t, cond, sched)


def exact_eps(world, x, t, cond, sched):
    return world.eps(x, t, cond, sched)


def posterior_class_prob(world, x, t, c, sched):
    return world.posterior_class_prob(x, t, c, sched)
