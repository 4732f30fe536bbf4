"""Command-line entry point: simulate, regret, fit, policy-table, calibrate.

Every command writes its outputs atomically and appends one entry to
``manifest.json`` in its output directory.  Exit codes: 0 success,
1 validation error, 2 learner breakage.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .domain import ValidationError, read_log, records_to_csv
from .evaluation import aggregate_replicates, calibration_report, cumulative_regret, failure_report
from .experiment import ALGORITHMS, ExperimentConfig, config_from_dict, replicate_model, run_replicate, schema_by_name
from .io_utils import atomic_write_text, sha256_file
from .learner import PriorSpec, SamplerConfig, diagnostics_json, draws_from_files, draws_to_csv, fit_posterior
from .modelspec import SpecConfig, build_model_spec
from .policy import ClipBounds, build_policy_table
from .simulator import AlgorithmKind, TrialAborted, algorithm_spec

EXIT_OK, EXIT_INVALID, EXIT_BROKEN = 0, 1, 2


# --- manifest --------------------------------------------------------------------

def _versions() -> dict:
    return {"pjitai": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()}


def append_manifest(out: Path, entry: dict) -> None:
    path = out / "manifest.json"
    doc = json.loads(path.read_text()) if path.exists() else {"runs": []}
    doc["runs"].append(entry)
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _manifest_entry(command, config, seed, inputs, outputs, out, started, extra=None) -> dict:
    entry = {
        "command": command,
        "config": config,
        "seed": seed,
        "versions": _versions(),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(Path(p).relative_to(out)): sha256_file(p) for p in outputs},
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
    }
    if extra:
        entry.update(extra)
    return entry


def _write(out: Path, name: str, text: str, written: list) -> Path:
    p = out / name
    atomic_write_text(p, text)
    written.append(p)
    return p


# --- config ------------------------------------------------------------------------

def load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ValidationError("config file must hold a mapping at the top level")
    return doc


def resolve_experiment(args) -> ExperimentConfig:
    """Defaults < config file < command-line flags."""
    try:
        cfg = config_from_dict(load_config_file(args.config))
        over = {}
        if args.seed is not None:
            over["seed"] = args.seed
        if args.setting is not None:
            over["setting"] = args.setting
        if args.algorithm:
            over["algorithms"] = list(args.algorithm)
        if args.replicates is not None:
            over["replicates"] = {a: args.replicates for a in ALGORITHMS}
        if getattr(args, "schema", None):
            over["schema"] = args.schema
        return config_from_dict(over, cfg)
    except ValueError as exc:
        raise ValidationError(f"invalid config: {exc}") from None


def _section(doc: dict, key: str, cls):
    try:
        return cls(**doc.get(key, {}))
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid config: {key}: {exc}") from None


# --- commands ------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    started = time.perf_counter()
    cfg = resolve_experiment(args)
    out = Path(args.out)
    schema = schema_by_name(cfg.schema)
    written: list[Path] = []
    broken = []
    for rep in range(max(cfg.n_replicates(a) for a in cfg.algorithms)):
        model = replicate_model(cfg, rep)
        _write(out, f"coefficients/setting{cfg.setting}_rep{rep:03d}.csv", model.to_csv(), written)
        for algo in cfg.algorithms:
            if rep >= cfg.n_replicates(algo):
                continue
            try:
                res = run_replicate(cfg, algo, rep, model)
            except TrialAborted as exc:
                res = exc.result
                broken.append(f"{algo}/{rep}: {exc}")
            _write(out, f"logs/{algo}_rep{rep:03d}.csv", records_to_csv(res.records, schema), written)
            schedule = sorted({(e.participant_id, e.scheduled_day) for e in res.updates})
            _write(out, f"failures/{algo}_rep{rep:03d}.csv", failure_report(schedule, res.updates).to_csv(), written)
    extra = {"replicates": {a: cfg.n_replicates(a) for a in cfg.algorithms}, "learner_breakage": broken}
    append_manifest(out, _manifest_entry("simulate", cfg.to_dict(), cfg.seed, [], written, out, started, extra))
    if broken:
        print("learner broke in: " + "; ".join(broken), file=sys.stderr)
        return EXIT_BROKEN
    print(f"wrote {len(written)} files to {out}")
    return EXIT_OK


def _last_simulate(log_dir: Path) -> dict:
    path = log_dir / "manifest.json"
    if not path.exists():
        raise ValidationError(f"{path} not found; run simulate first")
    runs = [r for r in json.loads(path.read_text())["runs"] if r["command"] == "simulate"]
    if not runs:
        raise ValidationError(f"{path} has no simulate run")
    return runs[-1]


def cmd_regret(args) -> int:
    started = time.perf_counter()
    log_dir = Path(args.logs)
    out = Path(args.out or args.logs)
    sim = _last_simulate(log_dir)
    schema = schema_by_name(sim["config"]["schema"])
    written, inputs, warnings = [], [], []
    for algo in sim["config"]["algorithms"]:
        files = sorted((log_dir / "logs").glob(f"{algo}_rep*.csv"))
        if not files:
            continue
        inputs += files
        traces = [cumulative_regret(read_log(f, schema), expected=args.expected) for f in files]
        curve = aggregate_replicates(traces)
        if curve.truncated:
            warnings.append(f"{algo}: replicate lengths differ; truncated to {len(curve.mean)} decisions")
        _write(out, f"regret_{algo}.csv", curve.to_csv(), written)
    if not written:
        raise ValidationError(f"no decision logs under {log_dir / 'logs'}")
    extra = {"truncation_warnings": warnings, "expected_regret": bool(args.expected)}
    append_manifest(out, _manifest_entry("regret", {"logs": str(log_dir)}, None, inputs, written, out, started, extra))
    for w in warnings:
        print("warning: " + w, file=sys.stderr)
    return EXIT_OK


def cmd_fit(args) -> int:
    started = time.perf_counter()
    doc = load_config_file(args.config)
    schema = schema_by_name(args.schema or doc.get("schema", "binary3"))
    records = read_log(args.data, schema)
    if not records:
        raise ValidationError(f"{args.data} holds no decisions")
    spec_cfg = _section(doc, "spec", SpecConfig)
    sampler_kw = dict(doc.get("sampler", {}))
    if args.seed is not None:
        sampler_kw["seed"] = args.seed
    sampler = _section({"sampler": sampler_kw}, "sampler", SamplerConfig)
    prior_doc = dict(doc.get("prior", {}))
    if "scale_by_order" in prior_doc:
        prior_doc["scale_by_order"] = {int(k): float(v) for k, v in prior_doc["scale_by_order"].items()}
    prior = _section({"prior": prior_doc}, "prior", PriorSpec)
    algo = AlgorithmKind(args.algorithm or "ls4l2")
    if algo is AlgorithmKind.LS4L2:
        spec = build_model_spec(records, schema, spec_cfg)
    else:
        spec = algorithm_spec(algo, records, schema, spec_cfg, None)
    draws, health = fit_posterior(records, spec, schema, prior, sampler)
    out = Path(args.out)
    written = []
    if draws is not None:
        _write(out, "posterior.csv", draws_to_csv(draws), written)
        _write(out, "diagnostics.json", diagnostics_json(draws, health, prior, sampler) + "\n", written)
    config = {"schema": schema.to_dict(), "spec": dataclasses.asdict(spec_cfg), "sampler": dataclasses.asdict(sampler),
              "algorithm": algo.value}
    extra = {"health": health.to_dict()}
    append_manifest(out, _manifest_entry("fit", config, sampler.seed, [Path(args.data)], written, out, started, extra))
    if not health.ok:
        print(f"learner breakage: {health.status} {list(health.offending)}", file=sys.stderr)
        return EXIT_BROKEN
    return EXIT_OK


def cmd_policy_table(args) -> int:
    started = time.perf_counter()
    post = Path(args.posterior)
    diag = Path(args.diagnostics) if args.diagnostics else post.with_name("diagnostics.json")
    schema = schema_by_name(args.schema or "binary3")
    draws, health = draws_from_files(post.read_text(), diag.read_text())
    if not health.ok:
        print(f"refusing to map a broken posterior: {health.status}", file=sys.stderr)
        return EXIT_BROKEN
    level_maps = {}
    for item in args.nearest or []:
        try:
            var, pair = item.split(":", 1)
            src, dst = pair.split("=", 1)
        except ValueError:
            raise ValidationError(f"--nearest expects var:level=target, got {item!r}") from None
        level_maps.setdefault(var, {})[src] = dst
    clip = ClipBounds(args.lower_clip, args.upper_clip)
    mode = "nearest" if level_maps else args.scenario2
    try:
        table = build_policy_table(draws, draws.spec, schema, clip=clip, participant=args.participant,
                                   scenario2_mode=mode, level_maps=level_maps)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    out = Path(args.out)
    written = []
    _write(out, "policy.csv", table.to_csv(), written)
    config = {"schema": schema.to_dict(), "clip": dataclasses.asdict(clip), "participant": args.participant,
              "scenario2": mode, "level_maps": level_maps}
    append_manifest(out, _manifest_entry("policy-table", config, None, [post, diag], written, out, started))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    started = time.perf_counter()
    schema = schema_by_name(args.schema or "binary3")
    records = read_log(args.log, schema)
    report = calibration_report(records, args.bin_width, args.target)
    out = Path(args.out)
    written = []
    _write(out, "calibration.csv", report.to_csv(), written)
    config = {"schema": schema.to_dict(), "bin_width": args.bin_width, "target": args.target}
    append_manifest(out, _manifest_entry("calibrate", config, None, [Path(args.log)], written, out, started))
    return EXIT_OK


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pjitai", description="Personalized JITAI bandit trial engine")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="YAML or JSON configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--schema", help="covariate schema: 'default' or 'binaryN'")

    p = sub.add_parser("simulate", help="run synthetic trials and write decision logs")
    common(p)
    p.add_argument("--setting", type=int, choices=[1, 2])
    p.add_argument("--algorithm", action="append", choices=list(ALGORITHMS))
    p.add_argument("--replicates", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("regret", help="aggregate cumulative regret from simulate logs")
    p.add_argument("logs", help="output directory of a simulate run")
    p.add_argument("--out")
    p.add_argument("--expected", action="store_true", help="use the policy-expected action instead of the realized one")
    p.set_defaults(func=cmd_regret)

    p = sub.add_parser("fit", help="fit the hierarchical model to a decision log")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--algorithm", choices=list(ALGORITHMS))
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("policy-table", help="map a fitted posterior to send probabilities")
    common(p)
    p.add_argument("--posterior", required=True)
    p.add_argument("--diagnostics")
    p.add_argument("--participant")
    p.add_argument("--scenario2", choices=["average", "nearest"], default="average")
    p.add_argument("--nearest", action="append", metavar="VAR:LEVEL=TARGET")
    p.add_argument("--lower-clip", type=float, default=0.05)
    p.add_argument("--upper-clip", type=float, default=0.95)
    p.set_defaults(func=cmd_policy_table)

    p = sub.add_parser("calibrate", help="binned calibration report for a decision log")
    common(p)
    p.add_argument("--log", required=True)
    p.add_argument("--bin-width", type=float, default=0.05)
    p.add_argument("--target", choices=["midpoint", "mean"], default="midpoint")
    p.set_defaults(func=cmd_calibrate)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors; 2 is reserved for learner breakage here
        return EXIT_INVALID if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (ValidationError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
