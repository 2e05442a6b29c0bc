"""Run configuration: a flat, line-based text grammar.

::

    # comment lines start with '#'
    [section]              or  [policy.<name>] / [evaluator.<name>]
    key = <JSON literal>   strings quoted, numbers, true/false, lists, objects

Parsing collects every problem it finds, each tagged with its line number,
and raises a single :class:`ConfigError` listing all of them.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field

from .diffusion import SAMPLERS
from .guidance import DEFAULT_CANDIDATES, DEFAULT_SCALE

BUILTIN_EVALUATORS = ("alignment-oracle", "quality-oracle")
LEARNED_KINDS = ("alignment-learned", "reward-learned", "discriminator-learned", "capability-learned")

_SECTION = re.compile(r"^\[([a-z]+)(?:\.([A-Za-z0-9_.\-]+))?\]$")
_KEY = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*)$")


@dataclass(frozen=True)
class Issue:
    line: int
    message: str

    def __str__(self):
        return f"line {self.line}: {self.message}" if self.line else self.message


class ConfigError(ValueError):
    def __init__(self, issues):
        self.issues = sorted(issues, key=lambda i: i.line)
        super().__init__("\n".join(str(i) for i in self.issues))


# -- value checkers ------------------------------------------------------------
# each returns (normalized value, error message or None)


def _int(lo=None, hi=None):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, int):
            return v, f"expected an integer, got {json.dumps(v)}"
        if lo is not None and v < lo:
            return v, f"must be >= {lo}"
        if hi is not None and v > hi:
            return v, f"must be <= {hi}"
        return v, None
    return check


def _float(lo=None, hi=None, lo_open=False):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            return v, f"expected a number, got {json.dumps(v)}"
        v = float(v)
        if lo is not None and (v <= lo if lo_open else v < lo):
            return v, f"must be {'>' if lo_open else '>='} {lo:g}"
        if hi is not None and v > hi:
            return v, f"must be <= {hi:g}"
        return v, None
    return check


def _str(choices=None):
    def check(v):
        if not isinstance(v, str):
            return v, f"expected a string, got {json.dumps(v)}"
        if choices is not None and v not in choices:
            return v, f"must be one of {', '.join(choices)}"
        return v, None
    return check


def _bool(v):
    if not isinstance(v, bool):
        return v, f"expected true or false, got {json.dumps(v)}"
    return v, None


def _numbers(increasing=False, nonempty=True):
    def check(v):
        if not isinstance(v, list) or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in v):
            return v, "expected a list of numbers"
        if nonempty and not v:
            return v, "must not be empty"
        v = tuple(float(x) for x in v)
        if increasing and any(b <= a for a, b in zip(v[:-1], v[1:])):
            return v, "must be strictly increasing"
        return v, None
    return check


def _ints(v):
    if not isinstance(v, list) or not v or any(isinstance(x, bool) or not isinstance(x, int) or x < 1 for x in v):
        return v, "expected a non-empty list of positive integers"
    return tuple(v), None


def _names(v):
    if not isinstance(v, list) or not v or any(not isinstance(x, str) for x in v):
        return v, "expected a non-empty list of names"
    return tuple(v), None


def _conds(v):
    if v == "balanced":
        return v, None
    if isinstance(v, list) and v and all(isinstance(x, int) and not isinstance(x, bool) and x >= 0 for x in v):
        return tuple(v), None
    return v, 'expected "balanced" or a non-empty list of class indices'


def _json_object(v):
    if not isinstance(v, list) or not v or any(not isinstance(c, dict) for c in v):
        return v, "expected a non-empty list of class objects"
    return v, None


# -- schema --------------------------------------------------------------------

_REQ = object()

SCHEMA = {
    "world": {
        "preset": (_str(), None),
        "classes": (_json_object, None),
        "priors": (_numbers(), None),
    },
    "schedule": {
        "family": (_str(("cosine", "linear")), "cosine"),
        "T": (_int(2), 200),
    },
    "experiment": {
        "n_seeds": (_int(1), 500),
        "conds": (_conds, "balanced"),
        "seed": (_int(0), 0),
        "baseline": (_str(), None),
        "n_boot": (_int(10), 1000),
        "sampler": (_str(tuple(SAMPLERS)), "ddpm"),
        "workers": (_int(0), 0),
        "reference_n": (_int(10), 5000),
    },
    "filter": {
        "B": (_int(1), 4),
        "K": (_int(1), 1),
        "fraction": (_float(0.0, 1.0, lo_open=True), 0.25),
        "evaluators": (_names, ("alignment-oracle",)),
        "policy": (_str(), None),
    },
    "output": {
        "dir": (_str(), "out"),
    },
}

POLICY_SCHEMA = {
    "fixed": {"scale": (_float(), DEFAULT_SCALE)},
    "interval": {
        "s_hi": (_float(), 11.0),
        "t_lo": (_int(0), None),
        "t_hi": (_int(0), None),
        "s_out": (_float(), 1.0),
    },
    "annealing": {
        "s_start": (_float(), 15.0),
        "s_end": (_float(), 1.0),
        "shape": (_str(("linear", "cosine")), "linear"),
    },
    "lookup": {
        "source": (_str(), None),
        "stat": (_str(("mean", "median")), "mean"),
        "table": (_numbers(), None),
    },
    "dynamic": {
        "evaluators": (_names, _REQ),
        "weighting": (_str(("adaptive", "linear")), "adaptive"),
        "coefficients": (_numbers(), None),
        "candidates": (_numbers(increasing=True), DEFAULT_CANDIDATES),
        "default_scale": (_float(), DEFAULT_SCALE),
    },
}

EVALUATOR_SCHEMA = {
    "artifact": (_str(), None),
    "n_train": (_int(2), 20000),
    "n_steps": (_int(0), 2000),
    "batch_size": (_int(2), 256),
    "lr": (_float(0.0, lo_open=True), 0.05),
    "momentum": (_float(0.0, 1.0), 0.9),
    "hidden": (_ints, (64, 64, 64)),
    "temperature": (_float(0.0, lo_open=True), 1.0),
    "loss_weighting": (_str(("none", "exponential", "linear")), None),
    "spread": (_float(0.0, lo_open=True), 1.0),
    "seed": (_int(0), 0),
}

SECTION_ORDER = ("world", "schedule", "experiment", "filter", "output")


@dataclass(frozen=True)
class PolicySpec:
    name: str
    kind: str
    params: dict


@dataclass(frozen=True)
class EvaluatorSpec:
    name: str
    kind: str
    params: dict


@dataclass
class RunConfig:
    world: dict
    schedule: dict
    experiment: dict
    filter: dict | None
    output: dict
    policies: list = field(default_factory=list)
    evaluators: list = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.experiment["seed"]

    def policy(self, name: str) -> PolicySpec:
        for p in self.policies:
            if p.name == name:
                return p
        raise KeyError(name)

    def evaluator(self, name: str) -> EvaluatorSpec:
        for e in self.evaluators:
            if e.name == name:
                return e
        raise KeyError(name)

    def config_hash(self) -> str:
        return hashlib.sha256(serialize(self).encode("utf-8")).hexdigest()


# -- parsing -------------------------------------------------------------------


def _tokenize(text: str, issues: list):
    """Yield (section, name, header line, {key: (value, line)}) blocks."""
    blocks, current, seen = [], None, set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            m = _SECTION.match(line)
            if not m:
                issues.append(Issue(lineno, f"malformed section header {line!r}"))
                current = None
                continue
            key = (m.group(1), m.group(2))
            if key in seen:
                issues.append(Issue(lineno, f"duplicate section [{line[1:-1]}]"))
                current = None
                continue
            seen.add(key)
            current = [m.group(1), m.group(2), lineno, {}]
            blocks.append(current)
            continue
        m = _KEY.match(line)
        if not m:
            issues.append(Issue(lineno, f"expected 'key = value', got {line!r}"))
            continue
        if current is None:
            issues.append(Issue(lineno, f"key {m.group(1)!r} outside any valid section"))
            continue
        k, v = m.group(1), m.group(2)
        if k in current[3]:
            issues.append(Issue(lineno, f"duplicate key {k!r}"))
            continue
        try:
            value = json.loads(v)
        except json.JSONDecodeError:
            issues.append(Issue(lineno, f"cannot parse value for {k!r}: {v!r} is not a JSON literal"))
            continue
        current[3][k] = (value, lineno)
    return blocks


def _apply(schema: dict, entries: dict, where: str, header_line: int, issues: list) -> dict:
    out = {}
    for k, (value, lineno) in entries.items():
        if k not in schema:
            issues.append(Issue(lineno, f"unknown key {k!r} in {where}"))
            continue
        norm, err = schema[k][0](value)
        if err:
            issues.append(Issue(lineno, f"{where} {k}: {err}"))
            continue
        out[k] = norm
    for k, (_, default) in schema.items():
        if k not in out and not any(k == e for e in entries):
            if default is _REQ:
                issues.append(Issue(header_line, f"{where} is missing required key {k!r}"))
            else:
                out[k] = default
    return out


def parse_config(text: str) -> RunConfig:
    issues: list[Issue] = []
    blocks = _tokenize(text, issues)
    plain = {s: {} for s in SECTION_ORDER}
    lines = {s: {} for s in SECTION_ORDER}
    present = set()
    policies, evaluators = [], []
    for section, name, hline, entries in blocks:
        if section in SCHEMA and name is None:
            present.add(section)
            plain[section] = _apply(SCHEMA[section], entries, f"[{section}]", hline, issues)
            lines[section] = {k: ln for k, (_, ln) in entries.items()}
        elif section == "policy" and name:
            kind_entry = entries.get("kind")
            if kind_entry is None:
                issues.append(Issue(hline, f"[policy.{name}] is missing required key 'kind'"))
                continue
            kind, kline = kind_entry
            if kind not in POLICY_SCHEMA:
                issues.append(Issue(kline, f"[policy.{name}] kind: must be one of {', '.join(POLICY_SCHEMA)}"))
                continue
            rest = {k: v for k, v in entries.items() if k != "kind"}
            params = _apply(POLICY_SCHEMA[kind], rest, f"[policy.{name}]", hline, issues)
            policies.append((PolicySpec(name, kind, params), {k: ln for k, (_, ln) in entries.items()}, hline))
        elif section == "evaluator" and name:
            kind_entry = entries.get("kind")
            if kind_entry is None:
                issues.append(Issue(hline, f"[evaluator.{name}] is missing required key 'kind'"))
                continue
            kind, kline = kind_entry
            if kind not in LEARNED_KINDS:
                issues.append(Issue(kline, f"[evaluator.{name}] kind: must be one of {', '.join(LEARNED_KINDS)}"))
                continue
            if name in BUILTIN_EVALUATORS:
                issues.append(Issue(hline, f"evaluator name {name!r} is reserved"))
                continue
            rest = {k: v for k, v in entries.items() if k != "kind"}
            params = _apply(EVALUATOR_SCHEMA, rest, f"[evaluator.{name}]", hline, issues)
            evaluators.append(EvaluatorSpec(name, kind, params))
        else:
            label = section + (f".{name}" if name else "")
            issues.append(Issue(hline, f"unknown section [{label}]"))
    for s in SECTION_ORDER:
        if s not in present:
            plain[s] = _apply(SCHEMA[s], {}, f"[{s}]", 0, issues)

    _cross_check(plain, lines, present, policies, evaluators, issues)
    if issues:
        raise ConfigError(issues)
    return RunConfig(
        world=plain["world"],
        schedule=plain["schedule"],
        experiment=plain["experiment"],
        filter=plain["filter"] if "filter" in present else None,
        output=plain["output"],
        policies=[p for p, _, _ in policies],
        evaluators=evaluators,
    )


def _cross_check(plain, lines, present, policies, evaluators, issues):
    world, wl = plain["world"], lines["world"]
    if world.get("preset") is None and world.get("classes") is None:
        issues.append(Issue(0, "[world] needs either 'preset' or 'classes'"))
    elif world.get("preset") is not None and world.get("classes") is not None:
        issues.append(Issue(wl.get("classes", 0), "[world] takes 'preset' or 'classes', not both"))
    elif world.get("preset") is not None:
        from .world import PRESETS
        if world["preset"] not in PRESETS:
            issues.append(Issue(wl.get("preset", 0), f"[world] preset: must be one of {', '.join(PRESETS)}"))
    else:
        try:
            build_world(world)
        except (ValueError, TypeError, KeyError) as exc:
            issues.append(Issue(wl.get("classes", 0), f"[world] classes: {exc}"))

    names = [p.name for p, _, _ in policies]
    known_evals = set(BUILTIN_EVALUATORS) | {e.name for e in evaluators}
    T = plain["schedule"].get("T", 200)
    for spec, pl, hline in policies:
        p = spec.params
        where = f"[policy.{spec.name}]"
        if spec.kind == "dynamic":
            for ev in p.get("evaluators", ()):
                if ev not in known_evals:
                    issues.append(Issue(pl.get("evaluators", hline), f"{where} evaluators: unknown evaluator {ev!r}"))
            coef = p.get("coefficients")
            if coef is not None and "evaluators" in p and len(coef) != len(p["evaluators"]):
                issues.append(Issue(pl["coefficients"], f"{where} coefficients: need one per evaluator"))
        elif spec.kind == "interval":
            lo, hi = p.get("t_lo"), p.get("t_hi")
            lo = T // 4 if lo is None else lo
            hi = (3 * T) // 4 if hi is None else hi
            if not lo < hi <= T:
                issues.append(Issue(pl.get("t_lo", hline), f"{where} needs t_lo < t_hi <= T (got {lo}, {hi}, T={T})"))
        elif spec.kind == "lookup":
            src, tab = p.get("source"), p.get("table")
            if (src is None) == (tab is None):
                issues.append(Issue(hline, f"{where} needs exactly one of 'source' or 'table'"))
            elif src is not None:
                match = [q for q, _, _ in policies if q.name == src]
                if not match or match[0].kind != "dynamic":
                    issues.append(Issue(pl["source"], f"{where} source: {src!r} is not a dynamic policy"))
            elif len(tab) != T + 1:
                issues.append(Issue(pl["table"], f"{where} table: needs T+1 = {T + 1} entries, got {len(tab)}"))
    base = plain["experiment"].get("baseline")
    if base is not None and base not in names:
        issues.append(Issue(lines["experiment"].get("baseline", 0), f"[experiment] baseline: unknown policy {base!r}"))

    if "filter" in present:
        f, fl = plain["filter"], lines["filter"]
        if "B" in f and "K" in f and f["K"] > f["B"]:
            issues.append(Issue(fl.get("K", fl.get("B", 0)), f"[filter] K={f['K']} exceeds B={f['B']}: K must not exceed B"))
        for ev in f.get("evaluators", ()):
            if ev not in known_evals:
                issues.append(Issue(fl.get("evaluators", 0), f"[filter] evaluators: unknown evaluator {ev!r}"))
        pol = f.get("policy")
        if pol is not None and pol not in names:
            issues.append(Issue(fl.get("policy", 0), f"[filter] policy: unknown policy {pol!r}"))


# -- serialization -------------------------------------------------------------


def _dump(v) -> str:
    if isinstance(v, tuple):
        v = list(v)
    return json.dumps(v, sort_keys=True)


def serialize(cfg: RunConfig) -> str:
    """Canonical text form; ``parse_config(serialize(c))`` reproduces ``c``."""
    out = []

    def block(header, items):
        out.append(f"[{header}]")
        for k, v in items:
            if v is not None:
                out.append(f"{k} = {_dump(v)}")
        out.append("")

    block("world", sorted(cfg.world.items()))
    block("schedule", sorted(cfg.schedule.items()))
    block("experiment", sorted(cfg.experiment.items()))
    if cfg.filter is not None:
        block("filter", sorted(cfg.filter.items()))
    block("output", sorted(cfg.output.items()))
    for p in cfg.policies:
        block(f"policy.{p.name}", [("kind", p.kind)] + sorted(p.params.items()))
    for e in cfg.evaluators:
        block(f"evaluator.{e.name}", [("kind", e.kind)] + sorted(e.params.items()))
    return "\n".join(out)


# -- building runtime objects --------------------------------------------------


def build_world(spec: dict):
    from .world import MixtureWorld, preset
    import numpy as np

    if spec.get("preset") is not None:
        return preset(spec["preset"])
    classes = spec["classes"]
    priors = spec.get("priors")
    if priors is None:
        priors = [1.0 / len(classes)] * len(classes)
    return MixtureWorld.from_dict({
        "name": "inline",
        "priors": list(priors),
        "classes": [{k: np.asarray(v, dtype=np.float64) for k, v in c.items()} for c in classes],
    })


def build_schedule(spec: dict):
    from .diffusion import NoiseSchedule

    return NoiseSchedule.from_name(spec["family"], spec["T"])


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
