"""Noise schedules, forward corruption, reverse steps and the CFG combination.

Timestep convention: ``t = 0`` is clean data and ``t = T`` is (near) pure
noise.  ``alpha_bar[t]`` is the cumulative signal-retention coefficient, so
``x_t = sqrt(alpha_bar[t]) * x_0 + sqrt(1 - alpha_bar[t]) * eps``.

Everything here is a pure function of its inputs.  Latents may be a single
vector of shape (d,) or a batch of shape (n, d); the shape is preserved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._validation import ContractError, check_same_shape


class SingularTimestepError(ContractError):
    """x_0 cannot be recovered when alpha_bar is zero."""


class CannotStepError(ContractError):
    """A reverse step was requested from t = 0."""


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Cumulative signal coefficients ``alpha_bar[0..T]``."""

    alpha_bar: np.ndarray
    family: str = "custom"

    def __post_init__(self):
        ab = np.array(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.shape[0] < 2:
            raise ContractError("alpha_bar needs at least two entries (t = 0 and t = T)")
        if ab[0] != 1.0:
            raise ContractError(f"alpha_bar[0] must be exactly 1, got {ab[0]!r}")
        if not np.all(np.diff(ab) < 0):
            raise ContractError("alpha_bar must be strictly decreasing")
        if ab[-1] <= 0.0:
            raise ContractError("alpha_bar must stay positive")
        if ab[-1] >= 1e-3:
            raise ContractError(f"alpha_bar[T] = {ab[-1]:.3g} is not near pure noise (< 1e-3)")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T(self) -> int:
        return self.alpha_bar.shape[0] - 1

    def __len__(self) -> int:
        return self.T

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, NoiseSchedule)
            and self.family == other.family
            and np.array_equal(self.alpha_bar, other.alpha_bar)
        )

    def __hash__(self) -> int:
        return hash((self.family, self.alpha_bar.tobytes()))

    def __getitem__(self, t) -> float:
        return self.alpha_bar[t]

    def alpha(self, t: int) -> float:
        """Per-step retention ``alpha_bar[t] / alpha_bar[t-1]``."""
        if t < 1:
            raise CannotStepError("per-step alpha is undefined at t = 0")
        return self.alpha_bar[t] / self.alpha_bar[t - 1]

    @classmethod
    def cosine(cls, T: int = 200, offset: float = 0.008, max_beta: float = 0.999):
        """Cosine schedule with per-step betas clipped at ``max_beta``."""
        if T < 1:
            raise ContractError("T must be a positive integer")
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + offset) / (1 + offset) * math.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 0.0, max_beta)
        ab = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(ab, family="cosine")

    @classmethod
    def linear(cls, T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02):
        """Linear betas, rescaled by 1000/T so short chains still reach noise."""
        if T < 1:
            raise ContractError("T must be a positive integer")
        scale = 1000.0 / T
        betas = np.linspace(beta_start * scale, beta_end * scale, T)
        betas = np.clip(betas, 0.0, 0.999)
        ab = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(ab, family="linear")

    @classmethod
    def from_name(cls, family: str, T: int):
        if family == "cosine":
            return cls.cosine(T)
        if family == "linear":
            return cls.linear(T)
        raise ContractError(f"unknown schedule family {family!r}")


@dataclass(frozen=True)
class LatentState:
    x: np.ndarray
    t: int


def _resolve_alpha_bar(t, sched, alpha_bar):
    if alpha_bar is not None:
        return float(alpha_bar)
    if sched is None:
        raise ContractError("either sched or alpha_bar is required")
    if not 0 <= t <= sched.T:
        raise ContractError(f"timestep {t} outside [0, {sched.T}]")
    return float(sched.alpha_bar[t])


def forward_noise(x0, t: int, noise, sched: NoiseSchedule | None = None, *, alpha_bar=None):
    """Corrupt clean latents to timestep ``t`` with the supplied Gaussian draw."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    check_same_shape(x0, noise, ("x0", "noise"))
    ab = _resolve_alpha_bar(t, sched, alpha_bar)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def predict_x0(x_t, eps_hat, t: int, sched: NoiseSchedule | None = None, *, alpha_bar=None):
    """Clean-data estimate implied by a noise prediction."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    check_same_shape(x_t, eps_hat, ("x_t", "eps_hat"))
    ab = _resolve_alpha_bar(t, sched, alpha_bar)
    if ab <= 0.0:
        raise SingularTimestepError(f"alpha_bar is zero at t={t}")
    return (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def cfg_combine(eps_uncond, eps_cond, s: float):
    """``eps_uncond + s * (eps_cond - eps_uncond)``."""
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    check_same_shape(eps_uncond, eps_cond, ("eps_uncond", "eps_cond"))
    if not math.isfinite(s):
        raise ContractError("guidance scale must be finite")
    return eps_uncond + s * (eps_cond - eps_uncond)


def ddpm_coefficients(sched: NoiseSchedule, t: int) -> tuple[float, float, float]:
    """Return (1/sqrt(alpha_t), beta_t/sqrt(1-alpha_bar_t), posterior std) for step t -> t-1.

    The posterior variance is the "small" one; it vanishes at t = 1 because
    alpha_bar[0] = 1.
    """
    if t < 1:
        raise CannotStepError("cannot take a reverse step from t = 0")
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t - 1]
    alpha_t = ab_t / ab_prev
    beta_t = 1.0 - alpha_t
    var = (1.0 - ab_prev) / (1.0 - ab_t) * beta_t
    return 1.0 / math.sqrt(alpha_t), beta_t / math.sqrt(1.0 - ab_t), math.sqrt(max(var, 0.0))


def ddpm_update(x, t: int, eps_guided, sched: NoiseSchedule, noise):
    """Array-level ancestral step; see :func:`ddpm_step`."""
    inv_sqrt_alpha, eps_coef, sigma = ddpm_coefficients(sched, t)
    mean = inv_sqrt_alpha * (x - eps_coef * eps_guided)
    if sigma == 0.0:
        return mean
    return mean + sigma * noise


def ddim_update(x, t: int, eps_guided, sched: NoiseSchedule, noise=None):
    """Array-level deterministic (eta = 0) step; ``noise`` is ignored."""
    if t < 1:
        raise CannotStepError("cannot take a reverse step from t = 0")
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t - 1]
    x0_hat = (x - math.sqrt(1.0 - ab_t) * eps_guided) / math.sqrt(ab_t)
    return math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_guided


def ddpm_step(state: LatentState, eps_guided, sched: NoiseSchedule, noise) -> LatentState:
    """Ancestral DDPM step t -> t-1 using a caller-supplied Gaussian draw."""
    x = np.asarray(state.x, dtype=np.float64)
    eps_guided = np.asarray(eps_guided, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    check_same_shape(x, eps_guided, ("x", "eps_guided"))
    check_same_shape(x, noise, ("x", "noise"))
    return LatentState(ddpm_update(x, state.t, eps_guided, sched, noise), state.t - 1)


def ddim_step(state: LatentState, eps_guided, sched: NoiseSchedule) -> LatentState:
    x = np.asarray(state.x, dtype=np.float64)
    eps_guided = np.asarray(eps_guided, dtype=np.float64)
    check_same_shape(x, eps_guided, ("x", "eps_guided"))
    return LatentState(ddim_update(x, state.t, eps_guided, sched), state.t - 1)


SAMPLERS = {"ddpm": ddpm_update, "ddim": ddim_update}
