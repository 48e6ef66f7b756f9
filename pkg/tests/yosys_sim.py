"""Independent check of emitted Verilog: synthesize with yosys, simulate its gates."""
from __future__ import annotations

import json
import shutil
import subprocess
import tempfile
from pathlib import Path

import numpy as np

YOSYS = shutil.which("yowasp-yosys") or shutil.which("yosys")

_GATES = {
    "$_NOT_": lambda p: ~p["A"],
    "$_BUF_": lambda p: p["A"],
    "$_AND_": lambda p: p["A"] & p["B"],
    "$_OR_": lambda p: p["A"] | p["B"],
    "$_XOR_": lambda p: p["A"] ^ p["B"],
    "$_XNOR_": lambda p: ~(p["A"] ^ p["B"]),
    "$_NAND_": lambda p: ~(p["A"] & p["B"]),
    "$_NOR_": lambda p: ~(p["A"] | p["B"]),
    "$_ANDNOT_": lambda p: p["A"] & ~p["B"],
    "$_ORNOT_": lambda p: p["A"] | ~p["B"],
    "$_MUX_": lambda p: np.where(p["S"], p["B"], p["A"]),
}


def synthesize(verilog: str, top: str) -> dict:
    with tempfile.TemporaryDirectory() as tmp:
        src, out = Path(tmp) / "design.v", Path(tmp) / "design.json"
        src.write_text(verilog)
        # the WebAssembly build only sees the working directory
        subprocess.run([YOSYS, "-q", "-p",
                        f"read_verilog {src.name}; synth -flatten -noabc -top {top}; write_json {out.name}"],
                       check=True, capture_output=True, timeout=600, cwd=tmp)
        return json.loads(out.read_text())["modules"][top]


def simulate(module: dict, x_bits: np.ndarray) -> np.ndarray:
    """Evaluate the synthesized gate graph; returns the class_idx integer per row."""
    n = x_bits.shape[0]
    val = {}
    for k, b in enumerate(module["ports"]["x"]["bits"]):
        val[b] = x_bits[:, k].astype(bool)

    def get(b):
        if b == "0" or b == "x":
            return np.zeros(n, dtype=bool)
        if b == "1":
            return np.ones(n, dtype=bool)
        return val[b]
    pending = list(module["cells"].values())
    while pending:
        rest = []
        for cell in pending:
            conns = cell["connections"]
            ins = {p: conns[p][0] for p, d in cell["port_directions"].items() if d == "input"}
            if any(not isinstance(b, str) and b not in val for b in ins.values()):
                rest.append(cell)
                continue
            y = _GATES[cell["type"]]({p: get(b) for p, b in ins.items()})
            val[conns["Y"][0]] = y
        if len(rest) == len(pending):
            raise RuntimeError("combinational loop or unsupported cell")
        pending = rest
    # nets driven by plain connections (netnames aliasing) resolve through val
    bits = [get(b) for b in module["ports"]["class_idx"]["bits"]]
    return sum(b.astype(np.int64) << k for k, b in enumerate(bits))
