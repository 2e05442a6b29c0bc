"""Guidance policies and the guided reverse chain.

A step from ``t`` to ``t - 1`` always costs exactly two denoiser calls: one
conditional and one unconditional prediction.  Fixed and scheduled policies
combine them with a single scale.  :class:`Dynamic` re-combines the same two
predictions for every candidate scale, takes one sampler step per candidate
with a shared noise draw, scores the candidates with latent evaluators at
``t - 1`` and keeps the best one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import ContractError
from .diffusion import SAMPLERS, LatentState, NoiseSchedule, cfg_combine
from .world import MixtureWorld

DEFAULT_CANDIDATES = (1.0, 3.0, 7.5, 11.0, 15.0)
DEFAULT_SCALE = 7.5
DENOM_FLOOR = 1e-6


@dataclass(frozen=True)
class GuidanceCandidateSet:
    scales: tuple = DEFAULT_CANDIDATES

    def __post_init__(self):
        scales = tuple(float(s) for s in self.scales)
        if not scales:
            raise ContractError("candidate set is empty")
        if any(not math.isfinite(s) for s in scales):
            raise ContractError("candidate scales must be finite")
        if any(b <= a for a, b in zip(scales[:-1], scales[1:])):
            raise ContractError("candidate scales must be strictly increasing")
        object.__setattr__(self, "scales", scales)

    def __len__(self):
        return len(self.scales)

    def __iter__(self):
        return iter(self.scales)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.scales)


# -- policies ------------------------------------------------------------------


@dataclass(frozen=True)
class Fixed:
    scale: float = DEFAULT_SCALE
    name: str = ""

    @property
    def label(self):
        return self.name or f"fixed_{self.scale:g}"


@dataclass(frozen=True)
class Interval:
    """``s_hi`` inside ``[t_lo, t_hi]``, ``s_out`` elsewhere."""

    s_hi: float
    t_lo: int
    t_hi: int
    s_out: float = 1.0
    name: str = ""

    def __post_init__(self):
        if not self.t_lo < self.t_hi:
            raise ContractError("interval needs t_lo < t_hi")

    @classmethod
    def middle_half(cls, T: int, s_hi: float = 11.0):
        return cls(s_hi, T // 4, (3 * T) // 4, name="interval")

    @property
    def label(self):
        return self.name or f"interval_{self.s_hi:g}"


@dataclass(frozen=True)
class Annealing:
    """Scale moves from ``s_start`` at the first step (t = T) to ``s_end`` at the last (t = 1)."""

    s_start: float = 15.0
    s_end: float = 1.0
    shape: str = "linear"
    name: str = ""

    def __post_init__(self):
        if self.shape not in ("linear", "cosine"):
            raise ContractError(f"unknown annealing shape {self.shape!r}")

    @property
    def label(self):
        return self.name or "annealing"


@dataclass(frozen=True, eq=False)
class StaticLookup:
    """Per-timestep table; ``table[t]`` is used for the step leaving t (t = 1..T)."""

    table: np.ndarray
    name: str = ""

    def __post_init__(self):
        tab = np.array(self.table, dtype=np.float64)
        tab.setflags(write=False)
        object.__setattr__(self, "table", tab)

    @property
    def label(self):
        return self.name or "static_lookup"


@dataclass(frozen=True, eq=False)
class Dynamic:
    """Greedy per-step search over candidate scales driven by evaluator feedback.

    ``weighting`` is ``"adaptive"`` (relative score change between the two
    most recent states) or ``"linear"`` (fixed ``coefficients``, equal by
    default).
    """

    evaluators: tuple
    candidates: GuidanceCandidateSet = field(default_factory=GuidanceCandidateSet)
    weighting: str = "adaptive"
    coefficients: tuple | None = None
    default_scale: float = DEFAULT_SCALE
    name: str = ""

    def __post_init__(self):
        if not isinstance(self.candidates, GuidanceCandidateSet):
            object.__setattr__(self, "candidates", GuidanceCandidateSet(tuple(self.candidates)))
        object.__setattr__(self, "evaluators", tuple(self.evaluators))
        if not self.evaluators:
            raise ContractError("dynamic guidance needs at least one evaluator")
        if self.weighting not in ("adaptive", "linear"):
            raise ContractError(f"unknown weighting {self.weighting!r}")
        if self.coefficients is not None:
            coef = tuple(float(c) for c in self.coefficients)
            if len(coef) != len(self.evaluators) or min(coef) < 0 or sum(coef) <= 0:
                raise ContractError("need one non-negative coefficient per evaluator with a positive sum")
            object.__setattr__(self, "coefficients", coef)

    @property
    def label(self):
        return self.name or f"dynamic_{self.weighting}"

    def linear_weights(self) -> np.ndarray:
        coef = np.ones(len(self.evaluators)) if self.coefficients is None else np.asarray(self.coefficients)
        return coef / coef.sum()


def scale_at(policy, t: int, T: int) -> float:
    """Scale used for the step leaving timestep ``t`` under a non-dynamic policy."""
    if not 1 <= t <= T:
        raise ContractError(f"timestep {t} outside [1, {T}]")
    if isinstance(policy, Fixed):
        return float(policy.scale)
    if isinstance(policy, Interval):
        return float(policy.s_hi if policy.t_lo <= t <= policy.t_hi else policy.s_out)
    if isinstance(policy, Annealing):
        progress = 0.0 if T == 1 else (T - t) / (T - 1)
        if policy.shape == "cosine":
            progress = 0.5 * (1.0 - math.cos(math.pi * progress))
        return float(policy.s_start + (policy.s_end - policy.s_start) * progress)
    if isinstance(policy, StaticLookup):
        tab = policy.table
        if t >= tab.shape[0] or not math.isfinite(tab[t]):
            raise ContractError(f"static lookup has no entry for t={t}")
        return float(tab[t])
    if isinstance(policy, Dynamic):
        raise ContractError("dynamic policies choose their scale online; use the chain runner")
    raise ContractError(f"unknown policy {policy!r}")


# -- selection pieces ----------------------------------------------------------


def adaptive_weights(history) -> np.ndarray:
    """Per-evaluator weights from the two most recent normalized scores.

    ``history`` has shape (steps, E) or (n, steps, E) in reverse-time order,
    so ``history[..., -1, :]`` is e_t and ``history[..., -2, :]`` is e_{t+1}.
    The relative change (e_t - e_{t+1}) / e_{t+1} is clamped at zero and
    renormalized; with fewer than two entries or an all-zero result the
    weights are uniform.
    """
    h = np.asarray(history, dtype=np.float64)
    squeeze = h.ndim == 2
    if squeeze:
        h = h[None]
    n, steps, E = h.shape
    uniform = np.full((n, E), 1.0 / E)
    if steps < 2:
        return uniform[0] if squeeze else uniform
    curr, prev = h[:, -1, :], h[:, -2, :]
    alpha = np.maximum((curr - prev) / np.maximum(prev, DENOM_FLOOR), 0.0)
    total = alpha.sum(axis=1, keepdims=True)
    w = np.where(total > 0, alpha / np.where(total > 0, total, 1.0), uniform)
    return w[0] if squeeze else w


def preference_rank(scales: np.ndarray, default_scale: float) -> np.ndarray:
    """Tie-break rank: closest to the default first, then the smaller scale."""
    order = sorted(range(len(scales)), key=lambda i: (abs(scales[i] - default_scale), scales[i]))
    rank = np.empty(len(scales), dtype=np.int64)
    rank[order] = np.arange(len(scales))
    return rank


def pick(scores: np.ndarray, rank: np.ndarray) -> np.ndarray:
    """Row-wise argmax of (n, m) scores with exact ties resolved by ``rank``."""
    best = scores.max(axis=1, keepdims=True)
    masked = np.where(scores == best, rank[None, :], np.iinfo(np.int64).max)
    return np.argmin(masked, axis=1)


def candidate_states(x, t, eps_u, eps_c, scales, sched, noise, sampler="ddpm"):
    """(n, m, d) next states, one per candidate scale, sharing the noise draw."""
    step = SAMPLERS[sampler]
    diff = eps_c - eps_u
    eps_g = eps_u[:, None, :] + scales[None, :, None] * diff[:, None, :]
    return step(x[:, None, :], t, eps_g, sched, None if noise is None else noise[:, None, :])


def score_candidates(evaluators, xc, t_next: int, conds) -> np.ndarray:
    """Raw evaluator scores, shape (n, m, E)."""
    n, m, d = xc.shape
    flat = xc.reshape(n * m, d)
    cond_rep = np.repeat(conds, m)
    out = np.empty((n, m, len(evaluators)))
    for e, ev in enumerate(evaluators):
        cond = cond_rep if getattr(ev, "requires_condition", False) else None
        out[:, :, e] = np.asarray(ev.evaluate(flat, t_next, cond)).reshape(n, m)
    return out


def _minmax(raw, lo, hi):
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (raw - lo) / safe, 0.0)


@dataclass
class StepRecord:
    t: int
    chosen_scale: float
    raw: np.ndarray
    normalized: np.ndarray
    weights: np.ndarray
    candidate_scores: np.ndarray


def dynamic_select(state: LatentState, eps_c, eps_u, candidates, evaluators, weights,
                   sched: NoiseSchedule, shared_noise, cond, *, sampler="ddpm",
                   default_scale=DEFAULT_SCALE, score_range=None):
    """Choose the scale for one step of one chain.

    ``weights`` holds one weight per evaluator.  Scores are min-max normalized
    per evaluator over ``score_range`` = (lo, hi) when given, otherwise over
    this step's candidates.  Returns ``(scale, StepRecord)``.
    """
    scales = np.asarray(tuple(candidates), dtype=np.float64)
    if scales.size == 0:
        raise ContractError("candidate set is empty")
    evaluators = tuple(evaluators)
    x = np.asarray(state.x, dtype=np.float64)[None, :]
    noise = None if shared_noise is None else np.asarray(shared_noise, dtype=np.float64)[None, :]
    xc = candidate_states(
        x, state.t, np.asarray(eps_u)[None, :], np.asarray(eps_c)[None, :], scales, sched, noise, sampler
    )
    raw = score_candidates(evaluators, xc, state.t - 1, np.array([-1 if cond is None else int(cond)]))
    if score_range is None:
        lo, hi = raw.min(axis=1), raw.max(axis=1)
    else:
        lo, hi = (np.asarray(v, dtype=np.float64)[None, :] for v in score_range)
    norm = _minmax(raw, lo[:, None, :], hi[:, None, :])
    w = np.asarray(weights, dtype=np.float64)
    combined = np.einsum("nme,e->nm", norm, w)
    j = int(pick(combined, preference_rank(scales, default_scale))[0])
    rec = StepRecord(state.t, float(scales[j]), raw[0, j], norm[0, j], w, combined[0])
    return float(scales[j]), rec


# -- chains --------------------------------------------------------------------


@dataclass
class NfeCounter:
    denoiser: int = 0
    evaluator: int = 0


@dataclass
class ScheduleTrace:
    """Per-step record of one chain, rows ordered from t = T down to t = 1."""

    t: np.ndarray
    chosen_scale: np.ndarray
    evaluator_names: tuple = ()
    raw: np.ndarray | None = None
    normalized: np.ndarray | None = None
    weights: np.ndarray | None = None
    candidate_scales: np.ndarray | None = None
    candidate_scores: np.ndarray | None = None

    def header(self) -> list[str]:
        cols = ["t", "chosen_scale"]
        for name in self.evaluator_names:
            cols += [f"{name}_raw", f"{name}_norm", f"{name}_weight"]
        if self.candidate_scales is not None:
            cols += [f"cand_{s:g}_score" for s in self.candidate_scales]
        return cols

    def rows(self) -> list[list]:
        out = []
        for i in range(self.t.shape[0]):
            row = [int(self.t[i]), float(self.chosen_scale[i])]
            for e in range(len(self.evaluator_names)):
                row += [float(self.raw[i, e]), float(self.normalized[i, e]), float(self.weights[i, e])]
            if self.candidate_scales is not None:
                row += [float(v) for v in self.candidate_scores[i]]
            out.append(row)
        return out


def evaluator_names(evaluators) -> tuple:
    names, seen = [], {}
    for ev in evaluators:
        base = ev.kind
        seen[base] = seen.get(base, 0) + 1
        names.append(base if seen[base] == 1 else f"{base}{seen[base]}")
    return tuple(names)


def chain_noise(master_seed: int, index: int, T: int, d: int) -> np.ndarray:
    """(T+1, d) Gaussian block for one chain: row 0 is x_T, row j the noise of step j."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(index),))
    return np.random.default_rng(ss).standard_normal((T + 1, d))


def batch_noise(master_seed: int, indices, T: int, d: int) -> np.ndarray:
    return np.stack([chain_noise(master_seed, i, T, d) for i in indices])


class ChainBatch:
    """Mutable state of n chains advancing together; rows never interact."""

    def __init__(self, runner, conds, noise):
        T = runner.sched.T
        n = conds.shape[0]
        self.conds = conds
        self.noise = noise
        self.x = noise[:, 0, :].copy()
        self.t = T
        self.denoiser = np.zeros(n, dtype=np.int64)
        self.evaluator = np.zeros(n, dtype=np.int64)
        self.chosen = np.full((n, T), np.nan)
        pol = runner.policy
        if isinstance(pol, Dynamic):
            E, m = len(pol.evaluators), len(pol.candidates)
            self.raw = np.full((n, T, E), np.nan)
            self.norm = np.full((n, T, E), np.nan)
            self.weights = np.full((n, T, E), np.nan)
            self.cand = np.full((n, T, m), np.nan)
            self.lo = np.full((n, E), np.inf)
            self.hi = np.full((n, E), -np.inf)
            self.hist = np.empty((n, 0, E))

    @property
    def n(self):
        return self.conds.shape[0]

    def take(self, idx):
        """Sub-batch with rows ``idx`` (copies)."""
        out = object.__new__(ChainBatch)
        for k, v in self.__dict__.items():
            out.__dict__[k] = v[idx].copy() if isinstance(v, np.ndarray) else v
        return out


@dataclass
class BatchResult:
    samples: np.ndarray
    conds: np.ndarray
    chosen_scales: np.ndarray
    denoiser_calls: np.ndarray
    evaluator_calls: np.ndarray
    T: int
    evaluator_names: tuple = ()
    candidate_scales: np.ndarray | None = None
    raw: np.ndarray | None = None
    normalized: np.ndarray | None = None
    weights: np.ndarray | None = None
    candidate_scores: np.ndarray | None = None

    def trace(self, i: int) -> ScheduleTrace:
        ts = np.arange(self.T, 0, -1)
        if self.raw is None:
            return ScheduleTrace(ts, self.chosen_scales[i])
        return ScheduleTrace(
            ts, self.chosen_scales[i], self.evaluator_names, self.raw[i], self.normalized[i],
            self.weights[i], self.candidate_scales, self.candidate_scores[i],
        )

    def counter(self, i: int) -> NfeCounter:
        return NfeCounter(int(self.denoiser_calls[i]), int(self.evaluator_calls[i]))


class ChainRunner:
    """Runs batches of guided reverse chains under one policy."""

    def __init__(self, world: MixtureWorld, sched: NoiseSchedule, policy, sampler: str = "ddpm"):
        if sampler not in SAMPLERS:
            raise ContractError(f"unknown sampler {sampler!r}")
        self.world = world
        self.sched = sched
        self.policy = policy
        self.sampler = sampler
        if isinstance(policy, Dynamic):
            self._scales = policy.candidates.array
            self._rank = preference_rank(self._scales, policy.default_scale)

    def start(self, conds, noise) -> ChainBatch:
        conds = np.asarray(conds, dtype=np.int64).reshape(-1)
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != (conds.shape[0], self.sched.T + 1, self.world.d):
            raise ContractError(f"noise block must have shape (n, T+1, d), got {noise.shape}")
        return ChainBatch(self, conds, noise)

    def advance(self, b: ChainBatch, t_stop: int = 0) -> ChainBatch:
        while b.t > t_stop:
            self._step(b)
        return b

    def _step(self, b: ChainBatch):
        t, T = b.t, self.sched.T
        j = T - t
        eps_u, eps_c = self.world.eps_pair(b.x, t, b.conds, self.sched)
        b.denoiser += 2
        z = b.noise[:, j + 1, :]
        pol = self.policy
        if isinstance(pol, Dynamic):
            self._dynamic_step(b, t, j, eps_u, eps_c, z)
        else:
            s = scale_at(pol, t, T)
            eps_g = cfg_combine(eps_u, eps_c, s)
            b.x = SAMPLERS[self.sampler](b.x, t, eps_g, self.sched, z)
            b.chosen[:, j] = s
        b.t = t - 1

    def _dynamic_step(self, b, t, j, eps_u, eps_c, z):
        pol = self.policy
        n = b.n
        xc = candidate_states(b.x, t, eps_u, eps_c, self._scales, self.sched, z, self.sampler)
        raw = score_candidates(pol.evaluators, xc, t - 1, b.conds)
        b.evaluator += len(self._scales) * len(pol.evaluators)
        b.lo = np.minimum(b.lo, raw.min(axis=1))
        b.hi = np.maximum(b.hi, raw.max(axis=1))
        norm = _minmax(raw, b.lo[:, None, :], b.hi[:, None, :])
        if pol.weighting == "linear":
            w = np.broadcast_to(pol.linear_weights(), (n, len(pol.evaluators)))
        else:
            w = adaptive_weights(_minmax(b.hist, b.lo[:, None, :], b.hi[:, None, :]))
        combined = np.einsum("nme,ne->nm", norm, w)
        choice = pick(combined, self._rank)
        rows = np.arange(n)
        b.x = xc[rows, choice]
        chosen_raw = raw[rows, choice]
        b.chosen[:, j] = self._scales[choice]
        b.raw[:, j] = chosen_raw
        b.norm[:, j] = norm[rows, choice]
        b.weights[:, j] = w
        b.cand[:, j] = combined
        b.hist = np.concatenate([b.hist[:, -1:, :], chosen_raw[:, None, :]], axis=1)

    def result(self, b: ChainBatch) -> BatchResult:
        pol = self.policy
        if isinstance(pol, Dynamic):
            return BatchResult(
                b.x, b.conds, b.chosen, b.denoiser, b.evaluator, self.sched.T,
                evaluator_names(pol.evaluators), self._scales, b.raw, b.norm, b.weights, b.cand,
            )
        return BatchResult(b.x, b.conds, b.chosen, b.denoiser, b.evaluator, self.sched.T)

    def run(self, conds, noise) -> BatchResult:
        return self.result(self.advance(self.start(conds, noise)))


def run_guided_chain(world, sched, policy, cond: int, seed: int, sampler: str = "ddpm", index: int = 0):
    """One chain from x_T ~ N(0, I); returns (sample, ScheduleTrace, NfeCounter)."""
    runner = ChainRunner(world, sched, policy, sampler)
    res = runner.run(np.array([cond]), chain_noise(seed, index, sched.T, world.d)[None])
    return res.samples[0], res.trace(0), res.counter(0)
