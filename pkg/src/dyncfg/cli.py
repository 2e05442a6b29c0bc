"""Command-line entry point: ``dyncfg <subcommand> [options]``.

Exit status is 0 on success, 1 when a run fails, and 2 for usage errors.
Every failure also prints one line to stderr of the form
``ERROR {"code": ..., "message": ...}``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, build_schedule, build_world, load_config, serialize
from .evaluators import AlignmentOracle, QualityOracle
from .evaluators.data import training_set
from .evaluators.io import ArtifactError, evaluator_bytes, load_evaluator
from .evaluators.io import _KINDS as LEARNED_CLASSES
from .guidance import Annealing, Dynamic, Fixed, GuidanceCandidateSet, Interval, StaticLookup
from .harness.experiments import (
    FilterConfig,
    MetricsReport,
    PolicyRun,
    aggregate_schedules,
    compare_policies,
    default_workers,
    filter_batch,
    op_count_report,
    run_cells,
    schedule_svg,
)
from .harness.metrics import bootstrap_ci, reference_moments, target_posteriors
from .outputs import (
    MANIFEST,
    ChecksumError,
    OutputExistsError,
    OutputWriter,
    RunManifest,
    atomic_write,
    read_csv,
    sha256_file,
    verify_outputs,
)


class CliError(Exception):
    def __init__(self, code: str, message: str, **details):
        super().__init__(message)
        self.code = code
        self.details = details


def _error_line(code: str, message: str, **details) -> str:
    return "ERROR " + json.dumps({"code": code, "message": message, **details}, sort_keys=True)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(_error_line("usage", message), file=sys.stderr)
        sys.exit(2)


# -- run context ---------------------------------------------------------------


class Context:
    def __init__(self, cfg: RunConfig, config_dir: Path, need_artifacts: bool = True):
        self.cfg = cfg
        self.world = build_world(cfg.world)
        self.sched = build_schedule(cfg.schedule)
        self.exp = cfg.experiment
        self.workers = self.exp["workers"] or default_workers()
        self.config_dir = config_dir
        self.artifacts = {}
        self.evaluators = {
            "alignment-oracle": AlignmentOracle(self.world, self.sched),
            "quality-oracle": QualityOracle(self.world, self.sched),
        }
        if need_artifacts:
            for spec in cfg.evaluators:
                if self._referenced(spec.name):
                    self.evaluators[spec.name] = self._load(spec)
        n = self.exp["n_seeds"]
        conds = self.exp["conds"]
        if conds == "balanced":
            self.conds = np.arange(n) % self.world.n_classes
        else:
            self.conds = np.resize(np.asarray(conds, dtype=np.int64), n)
            if self.conds.max() >= self.world.n_classes:
                raise CliError("config", f"condition {int(self.conds.max())} outside the world's {self.world.n_classes} classes")

    def _referenced(self, name):
        used = set()
        for p in self.cfg.policies:
            used.update(p.params.get("evaluators") or ())
        if self.cfg.filter is not None:
            used.update(self.cfg.filter["evaluators"])
        return name in used

    def _load(self, spec):
        rel = spec.params.get("artifact")
        if rel is None:
            raise CliError("artifact", f"evaluator {spec.name!r} has no 'artifact' path; run train-evals first")
        path = (self.config_dir / rel).resolve()
        if not path.exists():
            raise CliError("artifact", f"{path}: evaluator artifact not found; run train-evals first", path=str(path))
        try:
            ev = load_evaluator(path)
        except (ArtifactError, ValueError, KeyError) as exc:
            raise CliError("artifact", f"{path}: {exc}", path=str(path)) from exc
        if ev.kind != spec.kind:
            raise CliError("artifact", f"{path}: holds a {ev.kind} evaluator, config says {spec.kind}")
        self.artifacts[spec.name] = sha256_file(path)
        return ev

    def build_policy(self, spec, resolved: dict):
        p, T = spec.params, self.sched.T
        if spec.kind == "fixed":
            return Fixed(p["scale"], name=spec.name)
        if spec.kind == "interval":
            lo = T // 4 if p.get("t_lo") is None else p["t_lo"]
            hi = (3 * T) // 4 if p.get("t_hi") is None else p["t_hi"]
            return Interval(p["s_hi"], lo, hi, p["s_out"], name=spec.name)
        if spec.kind == "annealing":
            return Annealing(p["s_start"], p["s_end"], p["shape"], name=spec.name)
        if spec.kind == "dynamic":
            return Dynamic(
                tuple(self.evaluators[e] for e in p["evaluators"]),
                GuidanceCandidateSet(p["candidates"]),
                p["weighting"],
                p.get("coefficients"),
                p["default_scale"],
                name=spec.name,
            )
        if spec.kind == "lookup":
            if p.get("table") is not None:
                return StaticLookup(np.asarray(p["table"]), name=spec.name)
            src = resolved[p["source"]]
            agg = aggregate_schedules(src.result.chosen_scales, src.policy.candidates.scales)
            return agg.lookup(p["stat"], name=spec.name)
        raise CliError("config", f"unknown policy kind {spec.kind!r}")

    def run_policies(self, specs=None):
        """Run every policy on the experiment cells; lookups replay their source's schedule."""
        specs = list(specs or self.cfg.policies)
        ordered = [s for s in specs if s.kind != "lookup"] + [s for s in specs if s.kind == "lookup"]
        needed = {s.params["source"] for s in specs if s.kind == "lookup" and s.params.get("source")}
        for name in needed:
            if name not in {s.name for s in ordered}:
                ordered.insert(0, self.cfg.policy(name))
        runs = {}
        for spec in ordered:
            pol = self.build_policy(spec, runs)
            res = run_cells(self.world, self.sched, pol, self.conds, self.exp["seed"], self.exp["sampler"], self.workers)
            runs[spec.name] = PolicyRun(spec.name, res, pol)
        return {s.name: runs[s.name] for s in specs}


def _writer(args, cfg: RunConfig | None, command: str, out=None) -> OutputWriter:
    root = Path(out or args.out or (cfg.output["dir"] if cfg else "out"))
    man = RunManifest(
        command=command,
        config_hash=cfg.config_hash() if cfg else "",
        master_seed=cfg.seed if cfg else 0,
        tool_version=__version__,
        config=serialize(cfg) if cfg else "",
    )
    return OutputWriter(root, man, force=args.force)


def _load_cfg(args) -> tuple[RunConfig, Path]:
    if not args.config:
        raise CliError("usage", "--config is required for this subcommand")
    path = Path(args.config)
    if not path.exists():
        raise CliError("io", f"{path}: config file not found", path=str(path))
    cfg = load_config(path)
    if args.seed is not None:
        cfg.experiment["seed"] = args.seed
    if args.out is not None:
        cfg.output["dir"] = args.out
    if (Path(cfg.output["dir"]) / MANIFEST).exists() and not args.force:
        raise OutputExistsError(f"{cfg.output['dir']} already holds a run; pass --force to overwrite")
    return cfg, path.parent


# -- subcommands ---------------------------------------------------------------


def cmd_train_evals(args) -> int:
    cfg, cdir = _load_cfg(args)
    if not cfg.evaluators:
        raise CliError("config", "no [evaluator.<name>] sections to train")
    ctx = Context(cfg, cdir, need_artifacts=False)
    w = _writer(args, cfg, "train-evals")
    for i, spec in enumerate(cfg.evaluators):
        p = spec.params
        rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(2, i)))
        data = training_set(spec.kind, ctx.world, p["n_train"], rng, p["spread"])
        est = LEARNED_CLASSES[spec.kind](
            hidden=tuple(p["hidden"]), n_steps=p["n_steps"], batch_size=p["batch_size"], lr=p["lr"],
            momentum=p["momentum"], temperature=p["temperature"], loss_weighting=p["loss_weighting"],
            schedule=cfg.schedule["family"], T=cfg.schedule["T"], seed=p["seed"],
        )
        est.fit(*data)
        rel = f"evaluators/{spec.name}.dcfg"
        w.write_bytes(rel, evaluator_bytes(est))
        w.record_artifact(spec.name, w.manifest.files[rel])
        print(f"trained {spec.name} ({spec.kind}) -> {w.root / rel}")
    w.finalize()
    return 0


def cmd_sample(args) -> int:
    cfg, cdir = _load_cfg(args)
    ctx = Context(cfg, cdir)
    runs = ctx.run_policies()
    d = ctx.world.d
    rows = []
    for name, run in runs.items():
        for i in range(ctx.conds.size):
            rows.append([name, i, int(ctx.conds[i]), *map(float, run.result.samples[i])])
    rep = MetricsReport(["policy", "cell", "cond", *[f"x{k}" for k in range(d)]], rows, name="samples")
    w = _writer(args, cfg, "sample")
    w.manifest.evaluator_artifacts.update(ctx.artifacts)
    w.write_text("samples.csv", rep.to_csv())
    w.finalize()
    print(f"wrote {w.root / 'samples.csv'}")
    return 0


def cmd_search(args) -> int:
    cfg, cdir = _load_cfg(args)
    ctx = Context(cfg, cdir)
    specs = [s for s in cfg.policies if s.kind == "dynamic"]
    if not specs:
        raise CliError("config", "search needs at least one dynamic policy")
    runs = ctx.run_policies(specs)
    w = _writer(args, cfg, "search")
    w.manifest.evaluator_artifacts.update(ctx.artifacts)
    for name, run in runs.items():
        res = run.result
        header = ["cell", "cond", *res.trace(0).header()]
        rows = [[i, int(ctx.conds[i]), *r] for i in range(ctx.conds.size) for r in res.trace(i).rows()]
        w.write_text(f"traces/{name}.csv", MetricsReport(header, rows, name=f"trace:{name}").to_csv())
    w.finalize()
    print(f"wrote {len(runs)} trace file(s) under {w.root / 'traces'}")
    return 0


def cmd_filter(args) -> int:
    cfg, cdir = _load_cfg(args)
    if cfg.filter is None:
        raise CliError("config", "filter needs a [filter] section")
    ctx = Context(cfg, cdir)
    f = cfg.filter
    pname = f.get("policy") or (cfg.policies[0].name if cfg.policies else None)
    if pname is None:
        policy = Fixed(7.5)
    else:
        spec = cfg.policy(pname)
        if spec.kind == "lookup":
            raise CliError("config", "the filter policy cannot be a lookup")
        policy = ctx.build_policy(spec, {})
    seed, n_boot = ctx.exp["seed"], ctx.exp["n_boot"]
    args_common = (ctx.world, ctx.sched, policy, ctx.conds, seed, ctx.exp["sampler"], ctx.workers)
    base = filter_batch(FilterConfig(f["B"], f["B"], f["fraction"]), *args_common)
    base_post = np.stack(
        [target_posteriors(base.samples[:, b], ctx.conds, ctx.world) for b in range(f["B"])], axis=1
    ).mean(axis=1)
    cols = ["filter", "B", "K", "fraction", "n_prompts", "alignment", "alignment_lo", "alignment_hi",
            "d_alignment", "d_alignment_lo", "d_alignment_hi", "nfe", "evaluator_calls"]
    rows = [["none", f["B"], f["B"], f["fraction"], ctx.conds.size, float(base_post.mean()),
             *bootstrap_ci(base_post, n_boot, seed), 0.0, 0.0, 0.0,
             int(base.denoiser_calls.sum()), int(base.evaluator_calls.sum())]]
    for name in f["evaluators"]:
        fc = FilterConfig(f["B"], f["K"], f["fraction"], ctx.evaluators[name])
        res = filter_batch(fc, *args_common)
        post = np.stack(
            [target_posteriors(res.samples[:, k], ctx.conds, ctx.world) for k in range(f["K"])], axis=1
        ).mean(axis=1)
        diff = post - base_post
        rows.append([name, f["B"], f["K"], f["fraction"], ctx.conds.size, float(post.mean()),
                     *bootstrap_ci(post, n_boot, seed), float(diff.mean()), *bootstrap_ci(diff, n_boot, seed),
                     int(res.denoiser_calls.sum()), int(res.evaluator_calls.sum())])
    w = _writer(args, cfg, "filter")
    w.manifest.evaluator_artifacts.update(ctx.artifacts)
    w.write_text("table1_analog.csv", MetricsReport(cols, rows, name="filtering").to_csv())
    w.finalize()
    print(f"wrote {w.root / 'table1_analog.csv'}")
    return 0


def cmd_compare(args) -> int:
    cfg, cdir = _load_cfg(args)
    if not cfg.policies:
        raise CliError("config", "compare needs at least one [policy.<name>] section")
    ctx = Context(cfg, cdir)
    runs = ctx.run_policies()
    ref = reference_moments(ctx.world, ctx.exp["reference_n"], ctx.exp["seed"])
    policies = {name: run.policy for name, run in runs.items()}
    report, _ = compare_policies(
        policies, ctx.world, ctx.sched, ctx.conds, ctx.exp["seed"], ref, baseline=ctx.exp["baseline"],
        n_boot=ctx.exp["n_boot"], sampler=ctx.exp["sampler"], workers=ctx.workers, runs=runs,
    )
    ops = MetricsReport(["policy", "component", "calls", "ops_per_call", "ops", "overhead_pct", "ratio"], name="op_counts")
    for name, run in runs.items():
        for r in op_count_report(run.result, ctx.world, run.policy).rows:
            ops.rows.append([name, *r])
    w = _writer(args, cfg, "compare")
    w.manifest.evaluator_artifacts.update(ctx.artifacts)
    w.write_text("table2_analog.csv", report.to_csv())
    w.write_text("op_counts.csv", ops.to_csv())
    if args.svg:
        for name, run in runs.items():
            if isinstance(run.policy, Dynamic):
                agg = aggregate_schedules(run.result.chosen_scales, run.policy.candidates.scales)
                w.write_text(f"schedule_{name}.svg", schedule_svg(agg, run.policy.candidates.scales))
    w.finalize()
    print(f"wrote {w.root / 'table2_analog.csv'}")
    return 0


def cmd_report(args) -> int:
    if not args.run:
        raise CliError("usage", "report needs --run <output dir>")
    root = Path(args.run)
    try:
        man = verify_outputs(root)
    except FileNotFoundError as exc:
        raise CliError("io", f"{root}: no manifest found", path=str(root)) from exc
    except ChecksumError as exc:
        raise CliError("checksum", str(exc), problems=exc.problems) from exc
    lines = [f"# {man.command} run (seed {man.master_seed}, config {man.config_hash[:12]})", ""]
    for rel in sorted(man.files):
        if not rel.endswith(".csv"):
            continue
        meta, header, rows = read_csv(root / rel)
        lines += [f"## {rel}", "", "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        lines += ["| " + " | ".join(_short(v) for v in r) + " |" for r in rows[:50]]
        if len(rows) > 50:
            lines.append(f"({len(rows) - 50} more rows)")
        lines.append("")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    return 0


def _short(v: str) -> str:
    try:
        f = float(v)
    except ValueError:
        return v
    return v if f.is_integer() and "." not in v else f"{f:.4g}"


def cmd_schedules(args) -> int:
    if not args.traces or not args.out:
        raise CliError("usage", "schedules needs --traces <dir> and --out <file.csv>")
    tdir, out = Path(args.traces), Path(args.out)
    files = sorted(tdir.glob("*.csv"))
    if not files:
        raise CliError("io", f"{tdir}: no trace CSV files", path=str(tdir))
    if out.exists() and not args.force:
        raise CliError("exists", f"{out} exists; pass --force to overwrite", path=str(out))
    rows, svgs = [], {}
    for path in files:
        meta, header, body = read_csv(path)
        if "chosen_scale" not in header or "cell" not in header:
            raise CliError("schema", f"{path}: not a trace file", path=str(path))
        ic, it, isc = header.index("cell"), header.index("t"), header.index("chosen_scale")
        cands = [float(h[5:-6]) for h in header if h.startswith("cand_") and h.endswith("_score")]
        cells = sorted({int(r[ic]) for r in body})
        T = max(int(r[it]) for r in body)
        chosen = np.full((len(cells), T), np.nan)
        pos = {c: k for k, c in enumerate(cells)}
        for r in body:
            chosen[pos[int(r[ic])], T - int(r[it])] = float(r[isc])
        agg = aggregate_schedules(chosen, cands or None)
        for i in range(T):
            rows.append([path.stem, int(agg.t[i]), float(agg.mean[i]), float(agg.median[i]), float(agg.smoothed[i])])
        svgs[path.stem] = schedule_svg(agg, cands or None)
    rep = MetricsReport(["policy", "t", "mean", "median", "smoothed_normalized_median"], rows, name="schedules")
    atomic_write(out, rep.to_csv().encode("utf-8"))
    if args.svg:
        for name, svg in svgs.items():
            atomic_write(out.with_name(f"{out.stem}_{name}.svg"), svg.encode("utf-8"))
    print(f"wrote {out}")
    return 0


COMMANDS = {
    "train-evals": (cmd_train_evals, "train learned evaluators declared in the config"),
    "sample": (cmd_sample, "draw final samples for every policy"),
    "search": (cmd_search, "run dynamic guidance and write per-step schedule traces"),
    "filter": (cmd_filter, "best-of-B filtering experiment"),
    "compare": (cmd_compare, "paired policy comparison with bootstrap CIs"),
    "report": (cmd_report, "verify a run directory and print its tables"),
    "schedules": (cmd_schedules, "aggregate schedule traces into mean/median curves"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dyncfg", description="Dynamic guidance-scale search on analytic mixture worlds.")
    parser.add_argument("--version", action="version", version=f"dyncfg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="run configuration file")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help="output directory (schedules: output CSV path)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--svg", action="store_true", help="also write SVG charts")
        if name == "schedules":
            p.add_argument("--traces", help="directory of trace CSV files")
        if name == "report":
            p.add_argument("--run", help="run output directory to verify")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command][0](args)
    except ConfigError as exc:
        for issue in exc.issues:
            print(str(issue), file=sys.stderr)
        print(_error_line("config", "invalid configuration", issues=[str(i) for i in exc.issues]), file=sys.stderr)
    except CliError as exc:
        print(_error_line(exc.code, str(exc), **exc.details), file=sys.stderr)
    except OutputExistsError as exc:
        print(_error_line("exists", str(exc)), file=sys.stderr)
    except OSError as exc:
        print(_error_line("io", str(exc)), file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
