"""Run the full flow for several datasets and print one summary table per run.

    python scripts/run_experiment.py                      # every config in configs/ with data present
    python scripts/run_experiment.py --datasets breast_cancer --population 200
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from bespoke_mlp.dataset import DatasetError
from bespoke_mlp.pipeline import Run, RunConfig, report_text

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--configs", type=Path, default=ROOT / "configs")
    ap.add_argument("--datasets", nargs="*", help="config names to run (default: all)")
    ap.add_argument("--population", type=int)
    ap.add_argument("--generations", type=int)
    ap.add_argument("--runs-dir", type=Path, help="put outputs under this directory")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    paths = sorted(args.configs.glob("*.json"))
    if args.datasets:
        paths = [p for p in paths if p.stem in args.datasets]
    status = 0
    for path in paths:
        cfg = RunConfig.load(path)
        overrides = {k: v for k, v in (("population", args.population), ("generations", args.generations))
                     if v is not None}
        if args.runs_dir:
            overrides["out_dir"] = str(args.runs_dir / path.stem)
        cfg = dataclasses.replace(cfg, **overrides)
        print(f"== {path.stem}")
        try:
            m = Run(cfg).run()
        except DatasetError as exc:
            print(f"skipped: {exc}")
            continue
        except Exception as exc:
            print(f"failed: {exc}")
            status = 1
            continue
        print(report_text(m))
    return status


if __name__ == "__main__":
    sys.exit(main())
