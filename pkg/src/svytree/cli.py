"""Command-line driver: ``svytree <subcommand> [--config FILE] [key=value ...]``.

Subcommands read one TOML config (every key optional), apply flag and
key=value overrides, validate everything, and only then compute. Outputs go
to ``--out`` under fixed names and are written atomically. Errors are
reported as one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import tomli
import tomli_w

from .design import SIZE_CLASS_RATES, STRATIFIED, DesignFamily, DesignSpec, PreparedDesign, design_diagnostics
from .errors import ConfigError, SurveyError
from .estimate import (
    ESTIMATORS,
    GREG_LINEAR,
    GREG_TREE,
    HT,
    StepwiseControls,
    ht_estimator,
    linear_estimator,
    stepwise_select,
    tree_estimator,
)
from .frame import REFERENCE_N, Frame, SynthConfig, VariableSpec, atomic_write_text, load_frame, reference_config, synth_population
from .mc import DESK_REPLICATES, DESK_SAMPLE_SIZES, FULL_REPLICATES, FULL_SAMPLE_SIZES, SimConfig, replicate_seed, report_svg, run_simulation
from .tree import GrowControls, export_tree, grow_tree, load_tree, synth_config_from_tree

EXIT_OK, EXIT_COMPUTE, EXIT_ARGS, EXIT_CONFIG = 0, 1, 2, 3

DEFAULT_N = 2000

_INT, _FLOAT, _STR, _BOOL, _LIST, _TABLE = (int,), (int, float), (str,), (bool,), (list,), (dict,)

# key -> (accepted types, description); the single source for validation and --help
CONFIG_KEYS: dict[str, tuple[tuple, str]] = {
    "seed": (_INT, "run seed; --seed overrides it (default 0)"),
    "frame.source": (_STR, '"reference" (default), a synthetic-population TOML, or a frame CSV'),
    "frame.N": (_INT, f"population size for synthetic sources (reference default {REFERENCE_N})"),
    "frame.seed": (_INT, "population seed for synthetic sources (default: the run seed)"),
    "frame.from_tree": (_STR, "tree JSON; synthesize a population whose cell means are its leaf values"),
    "frame.study": (_STR, "study variable name for frame.from_tree (default: the tree's study)"),
    "frame.variables": (_LIST, "CSV schema: list of {name, kind, levels, role} tables"),
    "design.kind": (_STR, "stratified (default) | pps | srswor | census"),
    "design.strata": (_STR, 'stratification variable (default "size")'),
    "design.rates": (_TABLE, "relative sampling rate per stratum level, scaled to n (default size-class rates)"),
    "design.counts": (_TABLE, "explicit stratum sample sizes; overrides rates and n"),
    "design.size_variable": (_STR, "numeric size measure for pps"),
    "design.n": (_INT, f"sample size for tree, estimate and diagnose; --n overrides (default {DEFAULT_N})"),
    "tree.study": (_STR, "study variable to model (default: first study column)"),
    "tree.predictors": (_LIST, "predictor names offered to the tree (default: all)"),
    "tree.min_node": (_INT, "minimum units in each child, raw and weight-equivalent (default 25)"),
    "tree.min_improve": (_FLOAT, "minimum SSE reduction as a fraction of root SSE (default 0.001)"),
    "tree.max_depth": (_INT, "maximum depth (default 8)"),
    "tree.exhaustive_cutoff": (_INT, "exhaustive bipartition search up to this many levels (default 12)"),
    "tree.input": (_STR, "estimate: use this tree JSON instead of growing one"),
    "stepwise.penalty": (_FLOAT, "penalty per coefficient in n log(RSS) + penalty p (default 2)"),
    "stepwise.max_steps": (_INT, "maximum number of terms added (default unlimited)"),
    "stepwise.interactions": (_BOOL, "also offer pairwise categorical interactions (default false)"),
    "stepwise.candidates": (_LIST, "candidate predictor names (default: all)"),
    "estimate.estimator": (_STR, f"one of {', '.join(ESTIMATORS)} (default {GREG_TREE})"),
    "estimate.study": (_STR, "study variable (default: tree.study, else first study column)"),
    "simulate.sample_sizes": (_LIST, f"sample sizes; --n overrides (default {list(DESK_SAMPLE_SIZES)})"),
    "simulate.replicates": (_INT, f"replicates per sample size; --replicates overrides (default {DESK_REPLICATES})"),
    "simulate.estimators": (_LIST, "estimators to report; --estimators overrides (default all)"),
    "simulate.study": (_LIST, "study variables to simulate (default: all)"),
    "simulate.predictors": (_LIST, "predictors for both models (default: all)"),
    "simulate.workers": (_INT, "worker processes; results do not depend on it (default 1)"),
    "simulate.svg": (_BOOL, "also write report.svg; --svg sets it (default false)"),
}

OUTPUTS = {
    "synth": "frame.csv",
    "tree": "tree.json",
    "estimate": "estimate.json",
    "simulate": "report.csv, summary.json, report.svg (with --svg)",
    "diagnose": "diagnostics.json",
}


def config_help() -> str:
    lines = ["config keys (TOML; dotted names are [table] keys):"]
    width = max(len(k) for k in CONFIG_KEYS)
    for k, (_, desc) in CONFIG_KEYS.items():
        lines.append(f"  {k.ljust(width)}  {desc}")
    lines.append("")
    lines.append("key=value arguments override config keys; values are TOML literals or bare strings.")
    lines.append(f"exit status: 0 ok, {EXIT_COMPUTE} computation error, {EXIT_ARGS} bad arguments, "
                 f"{EXIT_CONFIG} config error")
    return "\n".join(lines)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _report("BadArguments", message)
        sys.exit(EXIT_ARGS)


def _report(name: str, message: str) -> None:
    print(json.dumps({"error": name, "message": message}), file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="svytree", description="Survey regression-tree estimation toolkit.",
                     epilog=config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    blurbs = {
        "synth": "generate a synthetic population frame",
        "tree": "draw one sample and grow a regression tree",
        "estimate": "draw one sample and estimate a population total",
        "simulate": "Monte Carlo comparison of estimators",
        "diagnose": "design diagnostics at sample size n",
    }
    for name, blurb in blurbs.items():
        p = sub.add_parser(name, help=blurb, description=f"{blurb}; writes {OUTPUTS[name]}",
                           epilog=config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", type=Path, help="TOML config file")
        p.add_argument("--seed", type=int, help="run seed (overrides config seed)")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory (default .)")
        p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")
        if name in ("tree", "estimate", "diagnose", "simulate"):
            p.add_argument("--n", help="sample size (simulate: comma-separated list)")
        if name == "estimate":
            p.add_argument("--estimators", help="estimator name")
        if name == "simulate":
            p.add_argument("--replicates", type=int, help="replicates per sample size")
            p.add_argument("--estimators", help="comma-separated estimator names")
            p.add_argument("--long", action="store_true",
                           help=f"full scale: n in {list(FULL_SAMPLE_SIZES)}, {FULL_REPLICATES} replicates")
            p.add_argument("--svg", action="store_true", help="also write report.svg")
    return parser


# --------------------------------------------------------------------------
# config handling


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def _set(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    d = cfg
    for p in parts[:-1]:
        d = d.setdefault(p, {})
        if not isinstance(d, dict):
            raise ConfigError(f"{key}: {p!r} is not a table")
    d[parts[-1]] = value


def _get(cfg: dict, key: str, default=None):
    d = cfg
    for p in key.split("."):
        if not isinstance(d, dict) or p not in d:
            return default
        d = d[p]
    return d


def _flatten(cfg: dict, prefix: str = ""):
    for k, v in cfg.items():
        key = prefix + k
        if isinstance(v, dict) and key not in CONFIG_KEYS:
            yield from _flatten(v, key + ".")
        else:
            yield key, v


def validate_config(cfg: dict) -> None:
    for key, value in _flatten(cfg):
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        types = CONFIG_KEYS[key][0]
        if isinstance(value, bool) and bool not in types or not isinstance(value, types):
            raise ConfigError(f"{key}: expected {' or '.join(t.__name__ for t in types)}, "
                              f"got {type(value).__name__}")


def _csv_list(text: str, conv=str) -> list:
    try:
        return [conv(x.strip()) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse list {text!r}") from None


def load_config(args) -> dict:
    cfg: dict = {}
    if args.config is not None:
        try:
            with open(args.config, "rb") as fh:
                cfg = tomli.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"config is not valid TOML: {exc}") from None
        base = args.config.resolve().parent
        for key in ("frame.source", "frame.from_tree", "tree.input"):
            v = _get(cfg, key)
            if isinstance(v, str) and v != "reference" and not os.path.isabs(v):
                _set(cfg, key, str(base / v))
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        _set(cfg, k.strip(), _parse_value(v.strip()))
    if args.seed is not None:
        cfg["seed"] = args.seed
    cmd = args.command
    if getattr(args, "n", None) is not None:
        if cmd == "simulate":
            _set(cfg, "simulate.sample_sizes", _csv_list(args.n, int))
        else:
            try:
                _set(cfg, "design.n", int(args.n))
            except ValueError:
                raise ConfigError(f"--n must be one integer for {cmd}") from None
    if cmd == "estimate" and args.estimators:
        _set(cfg, "estimate.estimator", args.estimators)
    if cmd == "simulate":
        if args.long:
            _set(cfg, "simulate.sample_sizes", list(FULL_SAMPLE_SIZES))
            _set(cfg, "simulate.replicates", FULL_REPLICATES)
        if args.replicates is not None:
            _set(cfg, "simulate.replicates", args.replicates)
        if args.estimators:
            _set(cfg, "simulate.estimators", _csv_list(args.estimators))
        if args.svg:
            _set(cfg, "simulate.svg", True)
    validate_config(cfg)
    return cfg


@dataclass
class Plan:
    """Everything a subcommand needs, resolved and checked before computing."""

    cfg: dict
    seed: int
    frame_source: object
    design: DesignFamily | DesignSpec
    grow: GrowControls
    stepwise: StepwiseControls


def _check_estimators(names) -> tuple[str, ...]:
    for e in names:
        if e not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {e!r}; choose from {', '.join(ESTIMATORS)}")
    return tuple(names)


def plan(cfg: dict, command: str) -> Plan:
    seed = _get(cfg, "seed", 0)
    if not 0 <= seed < 2**63:
        raise ConfigError("seed must be a nonnegative 63-bit integer")
    source = _get(cfg, "frame.source", "reference")
    from_tree = _get(cfg, "frame.from_tree")
    fseed = _get(cfg, "frame.seed", seed)
    N = _get(cfg, "frame.N")
    if from_tree is not None:
        if not os.path.isfile(from_tree):
            raise ConfigError(f"frame.from_tree: no such file {from_tree!r}")
        frame_source = ("tree", from_tree, _get(cfg, "frame.study"), N or 10_000, fseed)
    elif source == "reference":
        frame_source = ("synth", reference_config(N or REFERENCE_N, fseed))
    elif not os.path.isfile(source):
        raise ConfigError(f"frame.source: no such file {source!r}")
    elif source.endswith(".toml"):
        try:
            sc = SynthConfig.load(source)
        except (tomli.TOMLDecodeError, SurveyError) as exc:
            raise ConfigError(f"frame.source: {exc}") from None
        frame_source = ("synth", SynthConfig(N or sc.N, fseed, sc.studies, sc.predictors))
    else:
        variables = _get(cfg, "frame.variables")
        if not variables:
            raise ConfigError("frame.variables is required for a CSV frame source")
        try:
            schema = tuple(VariableSpec.from_dict(v) for v in variables)
        except (SurveyError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"frame.variables: {exc}") from None
        frame_source = ("csv", source, schema)

    kind = _get(cfg, "design.kind", STRATIFIED)
    if kind not in ("stratified", "pps", "srswor", "census"):
        raise ConfigError(f"design.kind: unknown design {kind!r}")
    if kind == "pps" and not _get(cfg, "design.size_variable"):
        raise ConfigError("design.size_variable is required for pps")
    counts = _get(cfg, "design.counts")
    if counts is not None:
        if kind != STRATIFIED:
            raise ConfigError("design.counts applies only to stratified designs")
        if command == "simulate":
            raise ConfigError("design.counts fixes n; use design.rates for simulate")
        design = DesignSpec.stratified(_get(cfg, "design.strata", "size"), counts)
    else:
        rates = _get(cfg, "design.rates", SIZE_CLASS_RATES)
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in rates.values()):
            raise ConfigError("design.rates values must be numbers")
        design = DesignFamily(kind, _get(cfg, "design.strata", "size"), dict(rates),
                              _get(cfg, "design.size_variable"))
    try:
        grow = GrowControls(**{k: v for k, v in cfg.get("tree", {}).items()
                               if k in ("min_node", "min_improve", "max_depth", "exhaustive_cutoff")})
        sw = cfg.get("stepwise", {})
        stepwise = StepwiseControls(float(sw.get("penalty", 2.0)), sw.get("max_steps"),
                                    bool(sw.get("interactions", False)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if command == "estimate":
        _check_estimators([_get(cfg, "estimate.estimator", GREG_TREE)])
        tree_in = _get(cfg, "tree.input")
        if tree_in is not None and not os.path.isfile(tree_in):
            raise ConfigError(f"tree.input: no such file {tree_in!r}")
    if command == "simulate":
        _check_estimators(_get(cfg, "simulate.estimators", list(ESTIMATORS)))
        sizes = _get(cfg, "simulate.sample_sizes", list(DESK_SAMPLE_SIZES))
        if not sizes or not all(isinstance(n, int) and n > 0 for n in sizes):
            raise ConfigError("simulate.sample_sizes must be positive integers")
        if _get(cfg, "simulate.replicates", DESK_REPLICATES) < 1:
            raise ConfigError("simulate.replicates must be positive")
        if _get(cfg, "simulate.workers", 1) < 1:
            raise ConfigError("simulate.workers must be positive")
    if _get(cfg, "design.n", DEFAULT_N) < 1:
        raise ConfigError("design.n must be positive")
    return Plan(cfg, seed, frame_source, design, grow, stepwise)


# --------------------------------------------------------------------------
# computation


def build_frame(p: Plan) -> Frame:
    src = p.frame_source
    if src[0] == "synth":
        return synth_population(src[1])
    if src[0] == "csv":
        return load_frame(src[1], src[2])
    _, path, study, N, seed = src
    return synth_population(synth_config_from_tree(load_tree(path), study, N, seed))


def _design_for(p: Plan, frame: Frame) -> DesignSpec:
    if isinstance(p.design, DesignSpec):
        return p.design
    return p.design.for_n(frame, _get(p.cfg, "design.n", DEFAULT_N))


def _draw(p: Plan, frame: Frame):
    design = _design_for(p, frame)
    # same stream as replicate 0 of a simulation at this n
    return design, PreparedDesign(design, frame).draw(replicate_seed(p.seed, design.n, 0))


def _study(p: Plan, frame: Frame, *keys) -> str:
    for k in keys:
        v = _get(p.cfg, k)
        if v is not None:
            return v
    studies = frame.studies
    if not studies:
        raise ConfigError("the frame has no study variable")
    return studies[0].name


def _write_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _archive(p: Plan, out: Path) -> None:
    atomic_write_text(out / "config.toml", tomli_w.dumps(p.cfg))


def cmd_synth(p: Plan, out: Path) -> None:
    build_frame(p).to_csv(out / "frame.csv")


def cmd_tree(p: Plan, out: Path) -> None:
    frame = build_frame(p)
    _, sample = _draw(p, frame)
    study = _study(p, frame, "tree.study")
    part = grow_tree(frame, sample, _get(p.cfg, "tree.predictors"), study, p.grow)
    atomic_write_text(out / "tree.json", export_tree(part))


def cmd_estimate(p: Plan, out: Path) -> None:
    frame = build_frame(p)
    design, sample = _draw(p, frame)
    kind = _get(p.cfg, "estimate.estimator", GREG_TREE)
    study = _study(p, frame, "estimate.study", "tree.study")
    if kind == HT:
        res = ht_estimator(sample, frame, study)
    elif kind == GREG_LINEAR:
        terms = stepwise_select(frame, sample, study, _get(p.cfg, "stepwise.candidates"), p.stepwise)
        res = linear_estimator(sample, frame, study, terms)
    else:
        tree_in = _get(p.cfg, "tree.input")
        part = (load_tree(tree_in) if tree_in else
                grow_tree(frame, sample, _get(p.cfg, "tree.predictors"), study, p.grow))
        res = tree_estimator(sample, frame, part, study)
    doc = res.to_dict()
    doc.update(study=study, n=sample.n, seed=p.seed, design=design.to_dict(), population_total=frame.total(study))
    _write_json(out / "estimate.json", doc)


def cmd_diagnose(p: Plan, out: Path) -> None:
    frame = build_frame(p)
    design = _design_for(p, frame)
    doc = design_diagnostics(design, frame).to_dict()
    doc["design"] = design.to_dict()
    _write_json(out / "diagnostics.json", doc)


def _progress(done: int, total: int) -> None:
    step = max(1, total // 20)
    if done % step == 0 or done == total:
        print(f"replicate {done}/{total}", file=sys.stderr, flush=True)


def cmd_simulate(p: Plan, out: Path) -> None:
    frame = build_frame(p)

    def g(key, default=None):
        return _get(p.cfg, "simulate." + key, default)

    sim = SimConfig(
        frame=frame,
        design=p.design,
        sample_sizes=tuple(g("sample_sizes", list(DESK_SAMPLE_SIZES))),
        replicates=g("replicates", DESK_REPLICATES),
        estimators=tuple(g("estimators", list(ESTIMATORS))),
        study=tuple(g("study")) if g("study") else None,
        predictors=tuple(g("predictors")) if g("predictors") else None,
        base_seed=p.seed,
        grow=p.grow,
        stepwise=p.stepwise,
        workers=g("workers", 1),
    )
    report = run_simulation(sim, progress=_progress)
    atomic_write_text(out / "report.csv", report.to_csv_text())
    summary = report.summary()
    summary.pop("elapsed_seconds")
    _write_json(out / "summary.json", summary)
    if g("svg", False):
        atomic_write_text(out / "report.svg", report_svg(report))
    print(f"elapsed {report.elapsed:.1f} s", file=sys.stderr)


COMMANDS = {"synth": cmd_synth, "tree": cmd_tree, "estimate": cmd_estimate,
            "simulate": cmd_simulate, "diagnose": cmd_diagnose}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        p = plan(cfg, args.command)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        _archive(p, out)
        COMMANDS[args.command](p, out)
    except ConfigError as exc:
        _report(exc.name, str(exc))
        return EXIT_CONFIG
    except SurveyError as exc:
        _report(exc.name, str(exc))
        return EXIT_COMPUTE
    except OSError as exc:
        _report(type(exc).__name__, str(exc))
        return EXIT_COMPUTE
    return EXIT_OK


def main() -> None:
    sys.exit(run())
