"""Export the datasets bundled with the ``keel-ds`` wheel to plain CSV.

Only Breast Cancer (Wisconsin) and Pendigits ship in that wheel. The wine
quality and cardiotocography files have to be fetched from the UCI
repository by hand (see data/README.md).

    pip install keel-ds
    python scripts/prepare_data.py --out data
"""
from __future__ import annotations

import argparse
import csv
import importlib.resources
from pathlib import Path

EXPORTS = {
    # keel name -> (csv name, header)
    "wisconsin": (
        "breast_cancer.csv",
        ["clump_thickness", "cell_size", "cell_shape", "marginal_adhesion",
         "epithelial_size", "bare_nuclei", "bland_chromatin", "normal_nucleoli",
         "mitoses", "class"],
    ),
    "penbased": (
        "pendigits.csv",
        [f"p{i}" for i in range(16)] + ["digit"],
    ),
}


def read_keel(name: str) -> list[list[str]]:
    root = importlib.resources.files("keel_ds") / "data" / "balanced" / "raw"
    text = (root / f"{name}.dat").read_text()
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("@"):
            continue
        rows.append([cell.strip() for cell in line.split(",")])
    return rows


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("data"))
    args = parser.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    for keel_name, (csv_name, header) in EXPORTS.items():
        rows = read_keel(keel_name)
        with open(args.out / csv_name, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        print(f"{csv_name}: {len(rows)} rows")


if __name__ == "__main__":
    main()
