"""Command line entry point: ``dpi <track> [flags]``, ``dpi verify`` and ``dpi plot``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from dpi.errors import NumericalError
from dpi.harness import (ExperimentConfig, format_report, read_records_csv, read_records_json, run_sweep,
                         verify, write_records_csv)
from dpi.mdp import TabularPolicy
from dpi.plot import emit_plot

log = logging.getLogger("dpi")

RUN_TRACKS = ("tabular", "cpi", "cartpole", "lti", "robust", "npg")
EXIT_OK, EXIT_INVALID, EXIT_VERIFY, EXIT_NUMERICAL = 0, 2, 3, 4

HELP = {
    "seeds": "one or more integer seeds",
    "alpha": "expert trust region (expected KL or TV to the current policy)",
    "beta": "reactive-policy trust region",
    "mu_bounds": "initial bracket for the dual variable",
    "ridge": "ridge penalty (dynamics fit or CSOAA regression)",
    "learn_std": "update the policy log-std with the NGD step",
    "count_eval": "count evaluation rollouts toward the episode budget",
    "advantage_cost": "cost under which the expert disadvantage is formed",
    "robust": "train on all training environments (--no-robust: one random one)",
    "corrupt_pdl": "scale the PDL right-hand side by 1.01 (harness self-test)",
    "jobs": "seeds run in parallel processes",
    "workers": "threads for episode collection within a run",
}


def _field_parser(f: dataclasses.Field):
    """(argparse kwargs) for one ExperimentConfig field, from its annotation."""
    ann = str(f.type)
    if f.name == "seeds":
        return dict(type=int, nargs="+")
    if f.name == "mu_bounds":
        return dict(type=float, nargs=2, metavar=("LO", "HI"))
    if ann == "bool":
        return dict(action=argparse.BooleanOptionalAction)
    for name, kind in (("int", int), ("float", float), ("str", str)):
        if ann.startswith(name):
            return dict(type=kind)
    raise TypeError(f"no parser for field {f.name}: {ann}")


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON document whose keys override the flags")
    for f in dataclasses.fields(ExperimentConfig):
        if f.name == "track":
            continue
        kwargs = _field_parser(f)
        parser.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None,
                            help=HELP.get(f.name), **kwargs)


def config_from_args(track: str, args: argparse.Namespace) -> ExperimentConfig:
    """Defaults, then command-line flags, then the --config document."""
    doc = {"track": track}
    for f in dataclasses.fields(ExperimentConfig):
        value = getattr(args, f.name, None)
        if value is not None and f.name != "track":
            doc[f.name] = value
    if getattr(args, "config", None) is not None:
        loaded = json.loads(Path(args.config).read_text())
        if not isinstance(loaded, dict):
            raise ValueError("--config must hold a JSON object")
        loaded.pop("track", None)
        doc.update(loaded)
    return ExperimentConfig.from_dict(doc).validate()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpi", description="Dual policy iteration experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for track in RUN_TRACKS:
        p = sub.add_parser(track, help=f"run the {track} experiment")
        add_config_flags(p)
    p = sub.add_parser("verify", help="numerically check the policy-improvement lemmas")
    add_config_flags(p)
    p = sub.add_parser("plot", help="plot metrics files as an SVG learning curve")
    p.add_argument("inputs", nargs="+", type=Path, help="metrics.csv or records .json files")
    p.add_argument("-o", "--output", type=Path, default=Path("plot.svg"))
    p.add_argument("--title", default="")
    return parser


def _policy_doc(policy) -> dict:
    if isinstance(policy, TabularPolicy):
        return {"kind": "tabular", "probs": policy.probs.tolist()}
    return policy.to_dict()


def _summary(rec) -> str:
    final = rec.rows[-1]
    failed = sum(bool(r["failed"]) for r in rec.rows)
    return (f"{rec.method} seed {rec.seed}: final cost {final['cost_mean']:.6g} "
            f"after {final['episodes']} episodes, {failed} failed iterations")


def cmd_run(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    results = run_sweep(cfg)
    records = [r for r, _ in results]
    write_records_csv(records, out / "metrics.csv")
    policies = [{"seed": rec.seed, "policy": _policy_doc(pol)} for rec, pol in results]
    (out / "policy.json").write_text(json.dumps(policies))
    emit_plot(records, out / "plot.svg", title=cfg.track)
    for rec in records:
        print(_summary(rec))
        for note in rec.notes:
            log.warning("seed %d: %s", rec.seed, note)
    print(f"wrote {out}/metrics.csv, config.json, policy.json, plot.svg")
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig) -> int:
    results = verify(cfg)
    print(format_report(results))
    bad = [r for r in results if not r.passed]
    if not bad:
        print("all checks passed")
        return EXIT_OK
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    dump = out / "violations.json"
    dump.write_text(json.dumps({r.name: r.offending for r in bad}))
    print(f"FAILED: {', '.join(r.name for r in bad)}; offending instances in {dump}")
    return EXIT_VERIFY


def cmd_plot(args) -> int:
    records = []
    for path in args.inputs:
        records += read_records_json(path) if path.suffix == ".json" else read_records_csv(path)
    emit_plot(records, args.output, args.title)
    print(f"wrote {args.output}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "plot":
            return cmd_plot(args)
        cfg = config_from_args(args.command, args)
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        if args.command == "verify":
            return cmd_verify(cfg)
        return cmd_run(cfg)
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
