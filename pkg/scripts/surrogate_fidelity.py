"""Rank agreement between the FA estimate and the netlist gate count.

Samples random chromosomes for the quantized model of a finished run (or at
least one past the ``quantize`` stage) and reports Spearman's rho.

    python scripts/surrogate_fidelity.py runs/breast_cancer --samples 200

Needs scipy (installed with the ``test`` extra).
"""
from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from bespoke_mlp.adder_tree import estimate_area
from bespoke_mlp.infer import Engine
from bespoke_mlp.mlp import QuantMLP
from bespoke_mlp.netlist import build_netlist


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("run_dirs", nargs="+", type=Path)
    ap.add_argument("--samples", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--min-keep", type=float, default=0.0,
                    help="keep probability per chromosome is drawn from [min-keep, 1]")
    ap.add_argument("--csv", type=Path, help="write (run, fa_estimate, gate_count) rows here")
    args = ap.parse_args()

    rows = []
    for run in args.run_dirs:
        engine = Engine(QuantMLP.load(run / "quant_model.json"))
        rng = np.random.default_rng(args.seed)
        t0 = time.perf_counter()
        fa, gates = [], []
        for _ in range(args.samples):
            c = rng.random(engine.n_genes) < rng.uniform(args.min_keep, 1.0)
            fa.append(estimate_area(engine.layout, c))
            gates.append(build_netlist(engine, c).weighted_gate_count())
        rho = spearmanr(fa, gates).statistic
        print(f"{run}: rho {rho:.4f} over {args.samples} chromosomes ({time.perf_counter() - t0:.1f}s)")
        rows += [(str(run), a, g) for a, g in zip(fa, gates)]
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "fa_estimate", "gate_count"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
