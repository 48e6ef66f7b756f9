"""Command line entry point.

Every subcommand works on one output directory; ``run`` chains them all.
Options come from ``--config`` (a JSON file with the same keys as the long
flags, dashes replaced by underscores) and are overridden by explicit flags.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from .pipeline import REGISTRY, Run, RunConfig, RunManifest, StageError, report_text, write_report

STAGES = ("train", "quantize", "optimize", "argmax", "emit", "run", "report")


def _topology(text: str) -> str:
    parts = text.split(",")
    if len(parts) != 3 or not all(p.strip().isdigit() and int(p) > 0 for p in parts):
        raise argparse.ArgumentTypeError("topology must be three positive integers, e.g. 11,2,6")
    return text


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with default values for the options below")
    common.add_argument("--dataset", help=f"registry name ({', '.join(REGISTRY)}) or CSV path")
    common.add_argument("--label-col", type=int)
    common.add_argument("--topology", type=_topology, help="n_inputs,n_hidden,n_outputs")
    common.add_argument("--seed", type=int)
    common.add_argument("--population", type=int)
    common.add_argument("--generations", type=int)
    common.add_argument("--acc-bound", type=float, help="GA accuracy-loss bound (absolute)")
    common.add_argument("--input-bits", type=int)
    common.add_argument("--weight-bits", type=int)
    common.add_argument("--out-dir")
    common.add_argument("--max-front-points", type=int)
    common.add_argument("--float-epochs", type=int)
    common.add_argument("--qat-epochs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="bespoke-mlp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "load, split, normalize, quantize inputs and train the float MLP",
        "quantize": "power-of-two QAT with QRelu",
        "optimize": "NSGA-II search over summand bits (writes front.jsonl)",
        "argmax": "fit approximate argmax plans on the selected front points",
        "emit": "Verilog, netlist cost, equivalence check and final assessment",
        "run": "all stages",
        "report": "print the summary of a finished run and rewrite report.csv",
    }
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    doc = {}
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
    names = {f.name for f in dataclasses.fields(RunConfig)}
    for key, value in vars(args).items():
        if key in names and value is not None:
            doc[key] = value
    return RunConfig.from_json(doc)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        run = Run(cfg)
        if args.command == "report":
            m = RunManifest.load(run.manifest_path)
            write_report(run.out / "report.csv", m)
            sys.stdout.write(report_text(m))
            return 0
        getattr(run, args.command)()
        if args.command in ("run", "emit"):
            sys.stdout.write(report_text(RunManifest.load(run.manifest_path)))
    except (StageError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
