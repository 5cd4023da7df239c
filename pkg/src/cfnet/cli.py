"""Command-line entry point: ``cfnet <subcommand> [options]``.

Exit codes: 0 success, 1 unexpected error, 2 config error, 3 missing input,
4 malformed file, 5 numeric failure, 6 distributed-protocol failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import autodiff, channel, harness, training

log = logging.getLogger("cfnet")

EXIT_CODES = {
    "config": 2,
    "missing-input": 3,
    "format": 4,
    "numeric": 5,
    "protocol": 6,
}


def _value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file (see `cfnet schema`)")
    p.add_argument("--output-dir", help="root directory for all artifacts")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field by dotted path, e.g. train.epochs=5 (repeatable)")
    p.add_argument("--scheme", help="loss scheme: S1, S2, B1, B2 or B3")
    p.add_argument("--epochs", type=int, help="training epochs")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cfnet", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and save train/test channel datasets")
    _common(p)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)

    p = sub.add_parser("train-cmtssl", help="train the centralized policy")
    _common(p)

    p = sub.add_parser("train-dmtssl", help="train per-SBS policies over the simulated bus")
    _common(p)
    p.add_argument("--trace", action="store_true", help="dump bus traffic to bus_trace.jsonl")

    p = sub.add_parser("transfer-datl", help="add one SBS, transfer the nearest model, compare with retraining")
    _common(p)
    p.add_argument("--from-run", type=Path, help="DMTSSL run directory holding sbs*.cfth")
    p.add_argument("--no-retrain", action="store_true", help="skip the retrained reference arm")

    p = sub.add_parser("baseline", help="evaluate RSA+ZFBF and GSA+ZFBF on the test set")
    _common(p)
    p.add_argument("--kind", choices=["rsa_zfbf", "gsa_zfbf"], action="append")

    p = sub.add_parser("sweep", help="sum rate and FLOPs over B, I or N")
    _common(p)
    p.add_argument("--axis", choices=["B", "I", "N"])
    p.add_argument("--values", help="comma-separated increasing values, e.g. 2,3,4")
    p.add_argument("--algorithms", help="comma-separated subset of " + ",".join(harness.ALGORITHMS))

    p = sub.add_parser("robustness-lab", help="label-noise tolerance experiment on toy data")
    _common(p)
    p.add_argument("--Z", type=int, default=5)
    p.add_argument("--etas", default="0,0.2,0.4")
    p.add_argument("--lab-epochs", type=int, default=60)

    p = sub.add_parser("gradcheck", help="finite-difference check of the task-value gradients")
    _common(p)
    p.add_argument("--instances", type=int, default=50)

    p = sub.add_parser("report", help="merge completed runs into CSV summaries and plot data")
    p.add_argument("dir", nargs="?", type=Path, default=None)
    _common(p)

    p = sub.add_parser("schema", help="print the JSON schema of the config file")
    return ap


def load_config(args) -> harness.ExperimentConfig:
    over: dict = {}
    for item in args.set:
        if "=" not in item:
            raise harness.ConfigError([f"--set {item}: expected KEY=VALUE"])
        key, val = item.split("=", 1)
        harness.set_path(over, key.strip(), _value(val))
    if args.output_dir is not None:
        over["output_dir"] = args.output_dir
    if args.seed is not None:
        over["seed"] = args.seed
    for flag, key in (("scheme", "train.scheme"), ("epochs", "train.epochs"),
                      ("n_train", "data.n_train"), ("n_test", "data.n_test")):
        val = getattr(args, flag, None)
        if val is not None:
            harness.set_path(over, key, val)
    if getattr(args, "axis", None) or getattr(args, "values", None):
        sw = over.setdefault("sweep", {})
        if args.axis:
            sw["axis"] = args.axis
        if args.values:
            try:
                sw["values"] = [int(x) for x in args.values.split(",") if x.strip()]
            except ValueError:
                raise harness.ConfigError([f"sweep.values: {args.values!r} is not a list of integers"])
        if getattr(args, "algorithms", None):
            sw["algorithms"] = [a.strip() for a in args.algorithms.split(",")]
    return harness.ExperimentConfig.load(args.config, over)


def run(args) -> int:
    if args.command == "schema":
        print(json.dumps(harness.CONFIG_SCHEMA, indent=2))
        return 0
    if args.command == "report":
        if args.dir is None:
            args.dir = load_config(args).output_dir
        summary = harness.report(args.dir)
        print(f"report: {summary['runs']} rows, {len(summary['partial'])} partial runs -> {args.dir / 'report'}")
        return 0
    cfg = load_config(args)
    if args.command == "gen-data":
        out = harness.gen_data(cfg)
    elif args.command == "train-cmtssl":
        out = harness.train_run(cfg, "cmtssl")
    elif args.command == "train-dmtssl":
        out = harness.train_run(cfg, "dmtssl", trace=args.trace)
    elif args.command == "transfer-datl":
        out = harness.datl_run(cfg, args.from_run, retrain=False if args.no_retrain else None)
    elif args.command == "baseline":
        out = harness.baseline_run(cfg, tuple(args.kind or ("rsa_zfbf", "gsa_zfbf")))
    elif args.command == "sweep":
        out = harness.sweep_run(cfg)
    elif args.command == "robustness-lab":
        etas = [float(x) for x in args.etas.split(",")]
        out = harness.robustness_run(cfg, Z=args.Z, etas=etas, epochs=args.lab_epochs)
    elif args.command == "gradcheck":
        out = harness.gradcheck_run(cfg, args.instances)
    else:  # pragma: no cover - argparse rejects unknown commands
        raise harness.HarnessError(f"unknown command {args.command}")
    print(f"{args.command}: wrote {out}")
    return 0


def _category(exc: BaseException) -> str:
    if isinstance(exc, harness.HarnessError):
        return exc.category
    if isinstance(exc, channel.FormatError):
        return "format"
    if isinstance(exc, (autodiff.NumericError, FloatingPointError)):
        return "numeric"
    if isinstance(exc, (training.ProtocolError, training.AlignmentError)):
        return "protocol"
    return "error"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except Exception as exc:  # noqa: BLE001 - every failure maps to a categorized exit code
        cat = _category(exc)
        print(f"cfnet: {cat} error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_CODES.get(cat, 1)


if __name__ == "__main__":
    sys.exit(main())
