"""Experiment engine: batched paired runs, best-of-N filtering, policy
comparison tables, schedule aggregation and operation counts.

Work is split into fixed-size chunks of (condition, seed) cells.  Each cell
draws its noise from a stream keyed by (master seed, cell index), and chunk
boundaries do not depend on the worker count, so every output is identical
whether chunks run in one process or many.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from .._validation import ContractError
from ..diffusion import NoiseSchedule
from ..evaluators.oracles import mixture_multiply_adds
from ..guidance import (
    BatchResult,
    ChainRunner,
    Dynamic,
    GuidanceCandidateSet,
    ScheduleTrace,
    StaticLookup,
    batch_noise,
)
from ..world import MixtureWorld
from .metrics import (
    bootstrap_ci,
    bootstrap_frechet_diff,
    class_frechet,
    frechet_from_moments,
    moments,
    target_posteriors,
)

CHUNK = 64
SCHEMA_VERSION = 1


def default_workers() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)


def _map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _merge(parts: list[BatchResult]) -> BatchResult:
    first = parts[0]
    out = {}
    for f in fields(BatchResult):
        v = getattr(first, f.name)
        if f.name in ("T", "evaluator_names", "candidate_scales") or v is None:
            out[f.name] = v
        else:
            out[f.name] = np.concatenate([getattr(p, f.name) for p in parts])
    return BatchResult(**out)


def _run_chunk(world, sched, policy, sampler, seed, conds, indices):
    noise = batch_noise(seed, indices, sched.T, world.d)
    return ChainRunner(world, sched, policy, sampler).run(conds, noise)


def run_cells(world: MixtureWorld, sched: NoiseSchedule, policy, conds, seed: int,
              sampler: str = "ddpm", workers: int = 1, chunk: int = CHUNK) -> BatchResult:
    """Run one chain per condition; cell ``i`` uses noise stream ``(seed, i)``."""
    conds = np.asarray(conds, dtype=np.int64).reshape(-1)
    if conds.size == 0:
        raise ContractError("no cells to run")
    jobs = [
        (world, sched, policy, sampler, seed, conds[a:a + chunk], range(a, min(a + chunk, conds.size)))
        for a in range(0, conds.size, chunk)
    ]
    return _merge(_map(_run_chunk, jobs, workers))


# -- filtering -----------------------------------------------------------------


@dataclass(frozen=True)
class FilterConfig:
    """Run ``B`` chains per prompt for ``fraction`` of the reverse steps, keep the ``K`` best."""

    B: int = 4
    K: int = 1
    fraction: float = 0.25
    evaluator: object = None

    def __post_init__(self):
        if not 1 <= self.K <= self.B:
            raise ContractError(f"need 1 <= K <= B, got K={self.K}, B={self.B}")
        if not 0.0 < self.fraction <= 1.0:
            raise ContractError(f"filter fraction must lie in (0, 1], got {self.fraction}")

    def steps_before(self, T: int) -> int:
        return min(T, max(1, int(math.floor(self.fraction * T + 0.5))))


@dataclass
class FilterResult:
    samples: np.ndarray          # (n, K, d)
    survivors: np.ndarray        # (n, K) chain offsets within each prompt's batch of B
    scores: np.ndarray           # (n, B) evaluator scores at the filter point
    conds: np.ndarray
    denoiser_calls: np.ndarray   # per prompt
    evaluator_calls: np.ndarray  # per prompt, filter scoring plus guidance


def _filter_chunk(cfg, world, sched, policy, sampler, seed, conds, prompt_ids):
    B, K, T = cfg.B, cfg.K, sched.T
    n = len(conds)
    chain_conds = np.repeat(conds, B)
    idx = [p * B + b for p in prompt_ids for b in range(B)]
    runner = ChainRunner(world, sched, policy, sampler)
    batch = runner.start(chain_conds, batch_noise(seed, idx, T, world.d))
    t_filter = T - cfg.steps_before(T)
    runner.advance(batch, t_filter)
    if K == B:
        keep = np.tile(np.arange(B), (n, 1))
        scores = np.full((n, B), np.nan)
        filter_calls = 0
    else:
        ev = cfg.evaluator
        if ev is None:
            raise ContractError("filtering with K < B needs an evaluator")
        cond = chain_conds if getattr(ev, "requires_condition", False) else None
        scores = np.asarray(ev.evaluate(batch.x, t_filter, cond), dtype=np.float64).reshape(n, B)
        # stable descending order: equal scores keep the earlier chain
        keep = np.sort(np.argsort(-scores, axis=1, kind="stable")[:, :K], axis=1)
        filter_calls = B
    rows = (np.arange(n)[:, None] * B + keep).reshape(-1)
    before_d = batch.denoiser.reshape(n, B).sum(axis=1)
    before_e = batch.evaluator.reshape(n, B).sum(axis=1)
    kept = runner.advance(batch.take(rows), 0)
    after_d = kept.denoiser.reshape(n, K).sum(axis=1) - batch.denoiser[rows].reshape(n, K).sum(axis=1)
    after_e = kept.evaluator.reshape(n, K).sum(axis=1) - batch.evaluator[rows].reshape(n, K).sum(axis=1)
    return FilterResult(
        kept.x.reshape(n, K, world.d), keep, scores, np.asarray(conds),
        before_d + after_d, before_e + after_e + filter_calls,
    )


def filter_batch(cfg: FilterConfig, world: MixtureWorld, sched: NoiseSchedule, policy, conds, seed: int,
                 sampler: str = "ddpm", workers: int = 1, chunk: int = 16) -> FilterResult:
    """Best-of-B filtering for every prompt in ``conds``.

    Prompt ``p`` owns chains ``p*B .. p*B+B-1`` of the noise stream, so K = B
    reproduces the unfiltered batch exactly.
    """
    conds = np.asarray(conds, dtype=np.int64).reshape(-1)
    jobs = [
        (cfg, world, sched, policy, sampler, seed, conds[a:a + chunk], range(a, min(a + chunk, conds.size)))
        for a in range(0, conds.size, chunk)
    ]
    parts = _map(_filter_chunk, jobs, workers)
    return FilterResult(*(np.concatenate([getattr(p, f.name) for p in parts]) for f in fields(FilterResult)))


def filter_best_of(cfg: FilterConfig, world, sched, policy, cond: int, seed: int,
                   sampler: str = "ddpm", index: int = 0) -> np.ndarray:
    """The K completed samples for one prompt, shape (K, d)."""
    res = _filter_chunk(cfg, world, sched, policy, sampler, seed, np.array([cond]), range(index, index + 1))
    return res.samples[0]


# -- reports -------------------------------------------------------------------


@dataclass
class MetricsReport:
    """A table with named columns; rows are lists in column order."""

    columns: list
    rows: list = field(default_factory=list)
    name: str = "report"
    notes: list = field(default_factory=list)

    def column(self, name):
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def row(self, key, by: str = "policy") -> dict:
        i = self.columns.index(by)
        for r in self.rows:
            if r[i] == key:
                return dict(zip(self.columns, r))
        raise KeyError(key)

    def to_csv(self) -> str:
        lines = [f"# schema_version={SCHEMA_VERSION} table={self.name}", ",".join(self.columns)]
        lines += [",".join(_fmt(v) for v in r) for r in self.rows]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    s = str(v)
    return f'"{s}"' if "," in s or '"' in s else s


REPORT_COLUMNS = [
    "policy", "n_seeds",
    "alignment", "alignment_lo", "alignment_hi", "log_posterior",
    "fd", "fd_lo", "fd_hi", "fd_regularized",
    "d_alignment", "d_alignment_lo", "d_alignment_hi",
    "d_fd", "d_fd_lo", "d_fd_hi",
    "nfe", "evaluator_calls", "ops",
]


@dataclass
class PolicyRun:
    label: str
    result: BatchResult
    policy: object


def _fd_regularized(samples, conds, reference) -> bool:
    flag = False
    for c, (mu, cov) in reference.items():
        sel = samples[conds == c]
        if sel.shape[0] > samples.shape[1]:
            flag |= frechet_from_moments(*moments(sel), mu, cov)[1]
    return flag


def _fd_ci(samples, conds, reference, n_boot, seed):
    rng = np.random.default_rng(seed)
    n = conds.shape[0]
    boots = np.empty(n_boot)
    for k in range(n_boot):
        i = rng.integers(0, n, size=n)
        boots[k] = class_frechet(samples[i], conds[i], reference)
    return float(np.quantile(boots, 0.025)), float(np.quantile(boots, 0.975))


def compare_policies(policies, world: MixtureWorld, sched: NoiseSchedule, conds, seed: int, reference: dict,
                     baseline: str | None = None, n_boot: int = 1000, sampler: str = "ddpm",
                     workers: int = 1, chunk: int = CHUNK, runs: dict | None = None):
    """Paired comparison of policies on the same (condition, seed) cells.

    ``policies`` is a sequence of policies (labels from ``.label``) or a dict
    label -> policy.  Differences are reported against ``baseline`` (default:
    the first policy).  Returns ``(MetricsReport, {label: PolicyRun})``.
    """
    items = list(policies.items()) if isinstance(policies, dict) else [(p.label, p) for p in policies]
    labels = [k for k, _ in items]
    if len(set(labels)) != len(labels):
        raise ContractError(f"duplicate policy labels: {labels}")
    conds = np.asarray(conds, dtype=np.int64).reshape(-1)
    runs = dict(runs or {})
    for label, pol in items:
        if label not in runs:
            runs[label] = PolicyRun(label, run_cells(world, sched, pol, conds, seed, sampler, workers, chunk), pol)
    base = runs[baseline or labels[0]]
    base_post = target_posteriors(base.result.samples, conds, world)
    report = MetricsReport(list(REPORT_COLUMNS), name="policy_comparison")
    for label, pol in items:
        res = runs[label].result
        post = target_posteriors(res.samples, conds, world)
        logpost = np.log(np.maximum(post, np.finfo(float).tiny))
        fd = class_frechet(res.samples, conds, reference)
        d_fd, (d_lo, d_hi) = bootstrap_frechet_diff(res.samples, base.result.samples, conds, reference, n_boot, seed)
        ops = op_count_report(res, world, pol)
        report.rows.append([
            label, int(conds.size),
            float(post.mean()), *bootstrap_ci(post, n_boot, seed), float(logpost.mean()),
            fd, *_fd_ci(res.samples, conds, reference, n_boot, seed),
            _fd_regularized(res.samples, conds, reference),
            float((post - base_post).mean()), *bootstrap_ci(post - base_post, n_boot, seed),
            d_fd, d_lo, d_hi,
            int(res.denoiser_calls.sum()), int(res.evaluator_calls.sum()), int(ops.row("total", by="component")["ops"]),
        ])
    return report, runs


# -- schedule aggregation ------------------------------------------------------


@dataclass
class ScheduleAggregate:
    t: np.ndarray          # T .. 1
    mean: np.ndarray
    median: np.ndarray
    smoothed: np.ndarray   # smoothed normalized median, in [0, 1]
    window: int

    def lookup(self, which: str = "mean", name: str = "") -> StaticLookup:
        """Replay a series as a StaticLookup indexed by timestep."""
        series = getattr(self, which)
        T = int(self.t[0])
        table = np.empty(T + 1)
        table[self.t] = series
        table[0] = table[1]
        return StaticLookup(table, name=name or f"{which}_of_dynamic")

    def table(self) -> MetricsReport:
        rep = MetricsReport(["t", "mean", "median", "smoothed_normalized_median"], name="schedule_aggregate")
        for i in range(self.t.size):
            rep.rows.append([int(self.t[i]), float(self.mean[i]), float(self.median[i]), float(self.smoothed[i])])
        return rep


def moving_average(v: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average; the window is truncated at both ends."""
    n = v.size
    lo_off, hi_off = (window - 1) // 2, window // 2
    csum = np.concatenate([[0.0], np.cumsum(v)])
    i = np.arange(n)
    a, b = np.maximum(i - lo_off, 0), np.minimum(i + hi_off, n - 1) + 1
    return (csum[b] - csum[a]) / (b - a)


def aggregate_schedules(traces, candidates=None) -> ScheduleAggregate:
    """Per-timestep mean, median and smoothed normalized median of chosen scales.

    ``traces`` is a sequence of ScheduleTrace or an (n, T) array whose
    column j holds the scale used at t = T - j.
    """
    if isinstance(traces, np.ndarray):
        chosen = np.atleast_2d(np.asarray(traces, dtype=np.float64))
    else:
        traces = list(traces)
        if not traces:
            raise ContractError("need at least one trace")
        chosen = np.stack([np.asarray(tr.chosen_scale, dtype=np.float64) for tr in traces])
    if chosen.shape[0] < 1 or chosen.shape[1] < 1:
        raise ContractError("need at least one non-empty trace")
    T = chosen.shape[1]
    cands = GuidanceCandidateSet(tuple(candidates)) if candidates is not None else GuidanceCandidateSet()
    lo, hi = cands.scales[0], cands.scales[-1]
    mean = chosen.mean(axis=0)
    median = np.median(chosen, axis=0)
    normed = (median - lo) / (hi - lo) if hi > lo else np.zeros_like(median)
    window = max(1, T // 20)
    return ScheduleAggregate(np.arange(T, 0, -1), mean, median, moving_average(normed, window), window)


def traces_from(result: BatchResult) -> list[ScheduleTrace]:
    return [result.trace(i) for i in range(result.samples.shape[0])]


# -- operation counts ----------------------------------------------------------


def sampler_multiply_adds(d: int, n_candidates: int) -> int:
    """Per step: the conditional/unconditional difference (d), then per
    candidate the scaled combination (d) and the ancestral update (3d)."""
    return d + n_candidates * 4 * d


def op_count_report(result: BatchResult, world: MixtureWorld, policy) -> MetricsReport:
    """Multiply-add estimates per component, summed over every chain in ``result``.

    The ``overhead_pct`` column gives each component's share of the total;
    the ``total`` row's ``ratio`` is total / baseline (denoiser + sampler).
    """
    d = world.d
    den_calls = int(result.denoiser_calls.sum())
    den_cost = mixture_multiply_adds(world, gradient=True)
    steps = den_calls // 2
    m = len(policy.candidates) if isinstance(policy, Dynamic) else 1
    rows = [
        ["denoiser", den_calls, den_cost, den_calls * den_cost],
        ["sampler", steps, sampler_multiply_adds(d, m), steps * sampler_multiply_adds(d, m)],
    ]
    if isinstance(policy, Dynamic):
        per_ev = int(result.evaluator_calls.sum()) // len(policy.evaluators)
        for name, ev in zip(result.evaluator_names, policy.evaluators):
            rows.append([f"evaluator:{name}", per_ev, int(ev.multiply_adds), per_ev * int(ev.multiply_adds)])
    baseline = rows[0][3] + rows[1][3]
    total = sum(r[3] for r in rows)
    rep = MetricsReport(["component", "calls", "ops_per_call", "ops", "overhead_pct", "ratio"], name="op_counts")
    for r in rows:
        rep.rows.append(r + [100.0 * r[3] / total if total else 0.0, r[3] / baseline if baseline else 0.0])
    rep.rows.append(["total", sum(r[1] for r in rows), 0, total, 100.0, total / baseline if baseline else 0.0])
    return rep


def evaluator_overhead_pct(report: MetricsReport) -> float:
    comp, pct = report.column("component"), report.column("overhead_pct")
    return float(sum(p for c, p in zip(comp, pct) if c.startswith("evaluator:")))


# -- charts --------------------------------------------------------------------


def schedule_svg(agg: ScheduleAggregate, candidates=None, width: int = 640, height: int = 360) -> str:
    """Line chart of the three aggregate series on the normalized [0, 1] scale."""
    cands = GuidanceCandidateSet(tuple(candidates)) if candidates is not None else GuidanceCandidateSet()
    lo, hi = cands.scales[0], cands.scales[-1]
    span = hi - lo if hi > lo else 1.0
    pad = 40
    T = int(agg.t[0])

    def pts(series):
        xs = pad + (T - agg.t) / max(T - 1, 1) * (width - 2 * pad)
        ys = height - pad - np.clip(series, 0.0, 1.0) * (height - 2 * pad)
        return " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))

    lines = [
        ("mean", (agg.mean - lo) / span, "#1f77b4"),
        ("median", (agg.median - lo) / span, "#ff7f0e"),
        ("smoothed normalized median", agg.smoothed, "#2ca02c"),
    ]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">step (t = {T} to 1)</text>',
    ]
    for k, (label, series, color) in enumerate(lines):
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts(series)}"/>')
        out.append(f'<text x="{width - pad}" y="{pad + 14 * k}" text-anchor="end" font-size="11" fill="{color}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
