"""Verilog-2001 emission of a bespoke approximate MLP.

One flat combinational module. Power-of-two products are wiring: every
summand is a concatenation of input (or QRelu output) bits placed at its
column, with pruned bits written as 1'b0. Each neuron sums its positive and
negative summands separately and subtracts. The argmax is the plan's
comparator bracket over offset-binary values, and the module outputs a binary
class index.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass

import numpy as np

from .adder_tree import chromosome_to_bits
from .argmax import ArgmaxPlan, full_width_plan
from .infer import Engine
from .mlp import QuantMLP

_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_KEYWORDS = {
    "always", "assign", "begin", "case", "default", "else", "end", "endcase", "endmodule",
    "for", "function", "if", "initial", "inout", "input", "integer", "module", "output",
    "parameter", "reg", "wire", "localparam", "generate", "endgenerate", "genvar",
}


@dataclass
class EmitConfig:
    module_name: str = "bespoke_mlp"
    include_argmax: bool = True
    train_accuracy: float | None = None
    test_accuracy: float | None = None
    fa_estimate: int | None = None

    def __post_init__(self):
        if not _IDENT.match(self.module_name) or self.module_name in _KEYWORDS:
            raise ValueError(f"invalid Verilog module name {self.module_name!r}")


def short_hash(payload) -> str:
    if not isinstance(payload, (str, bytes)):
        payload = json.dumps(payload, sort_keys=True)
    if isinstance(payload, str):
        payload = payload.encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def _zeros(n: int) -> str:
    return "1'b0" if n == 1 else f"{{{n}{{1'b0}}}}"


def _concat(bits_msb_first: list[str]) -> str:
    # merge runs of constant zeros to keep lines readable
    out, zeros = [], 0
    for b in bits_msb_first:
        if b == "1'b0":
            zeros += 1
            continue
        if zeros:
            out.append(_zeros(zeros))
            zeros = 0
        out.append(b)
    if zeros:
        out.append(_zeros(zeros))
    return "{" + ", ".join(out) + "}" if len(out) > 1 else out[0]


class _Writer:
    def __init__(self, engine: Engine, mask: np.ndarray):
        self.e = engine
        self.mask = mask
        self.lines: list[str] = []

    def w(self, line: str = "") -> None:
        self.lines.append(line)

    def neuron(self, prefix: str, layer: int, neuron: int, width: int, source: str,
               source_bits: int) -> str:
        e = self.e
        lay = e.layout
        if layer == 0:
            genes, col, owner, bias = e.hidden_genes, e.hidden_col, e.hidden_neuron, int(e.hidden_bias[neuron])
        else:
            genes, col, owner, bias = e.output_genes, e.output_col, e.output_neuron, int(e.output_bias[neuron])
        terms = {1: [], -1: []}
        sel = np.flatnonzero(owner == neuron)
        # group the neuron's genes by tree row
        rows: dict[tuple[int, int], list[int]] = {}
        for k in sel:
            g = genes[k]
            rows.setdefault((int(lay.gene_tree[g]), int(lay.gene_row[g])), []).append(k)
        for key in sorted(rows):
            ks = rows[key]
            g0 = genes[ks[0]]
            sign = int(lay.gene_sign[g0])
            src = int(lay.gene_source[g0])
            low = int(col[ks[0]])
            bits = []
            for k in ks:
                g = genes[k]
                idx = src * source_bits + int(lay.gene_bit[g])
                bits.append(f"{source}[{idx}]" if self.mask[g] else "1'b0")
            if not any(b != "1'b0" for b in bits):
                continue
            msb_first = bits[::-1] + ["1'b0"] * low
            terms[sign].append(_concat(msb_first))
        if bias:
            terms[1 if bias > 0 else -1].append(f"{width}'d{abs(bias)}")
        for sign, tag in ((1, "pos"), (-1, "neg")):
            expr = " + ".join(terms[sign]) if terms[sign] else f"{width}'d0"
            self.w(f"  wire [{width - 1}:0] {prefix}_{tag} = {expr};")
        self.w(f"  wire [{width - 1}:0] {prefix}_acc = {prefix}_pos - {prefix}_neg;")
        return f"{prefix}_acc"

    def qrelu(self, name: str, acc: str, width: int, shift: int, out_bits: int) -> None:
        win = []
        for b in reversed(range(out_bits)):
            i = shift + b
            win.append(f"{acc}[{i}]" if 0 <= i < width - 1 else "1'b0")
        lo, hi = max(shift + out_bits, 0), width - 2
        ovf = f"|{acc}[{hi}:{lo}]" if lo <= hi else "1'b0"
        self.w(f"  wire {name}_ovf = {ovf};")
        self.w(f"  wire [{out_bits - 1}:0] {name}_win = {_concat(win)};")
        self.w(f"  wire [{out_bits - 1}:0] {name} = {acc}[{width - 1}] ? {out_bits}'d0 : "
               f"({name}_ovf ? {{{out_bits}{{1'b1}}}} : {name}_win);")


def emit_verilog(m: QuantMLP | Engine, chromosome=None, plan: ArgmaxPlan | None = None,
                 cfg: EmitConfig | None = None) -> str:
    cfg = cfg or EmitConfig()
    engine = m if isinstance(m, Engine) else Engine(m)
    model = engine.model
    mask = engine._check_mask(chromosome)
    topo = model.topology
    W = engine.output_width
    plan = plan or full_width_plan(topo.n_outputs, W)
    if plan.width != W or plan.n_classes != topo.n_outputs:
        raise ValueError("argmax plan does not match the model's output layer")
    n_in = topo.n_inputs * model.input_bits
    idx_bits = max(1, (topo.n_outputs - 1).bit_length())

    wr = _Writer(engine, mask)
    wr.w("// bespoke approximate MLP, combinational")
    wr.w(f"// topology {topo.n_inputs}-{topo.n_hidden}-{topo.n_outputs}, "
         f"{model.input_bits}-bit inputs, {engine.out_bits}-bit QRelu")
    wr.w(f"// model hash {short_hash(model.to_json())}")
    wr.w(f"// chromosome hash {short_hash(chromosome_to_bits(mask))}, "
         f"kept {int(mask.sum())} of {mask.size} summand bits")
    wr.w(f"// argmax plan hash {plan.digest()}")
    if cfg.fa_estimate is not None:
        wr.w(f"// estimated full adders {cfg.fa_estimate}")
    if cfg.train_accuracy is not None:
        wr.w(f"// train accuracy {cfg.train_accuracy:.6f}")
    if cfg.test_accuracy is not None:
        wr.w(f"// test accuracy {cfg.test_accuracy:.6f}")
    wr.w(f"module {cfg.module_name} (")
    wr.w(f"  input  wire [{n_in - 1}:0] x,")
    if cfg.include_argmax:
        wr.w(f"  output wire [{idx_bits - 1}:0] class_idx")
    else:
        wr.w(f"  output wire [{topo.n_outputs * W - 1}:0] scores")
    wr.w(");")

    wr.w(f"  // hidden layer; feature i occupies x bits {model.input_bits}i to {model.input_bits}i+{model.input_bits - 1}")
    for j in range(topo.n_hidden):
        width = int(engine.hidden_width[j])
        acc = wr.neuron(f"n{j}", 0, j, width, "x", model.input_bits)
        wr.qrelu(f"h{j}", acc, width, int(engine.qrelu_shift[j]), engine.out_bits)
    hbus = ", ".join(f"h{j}" for j in reversed(range(topo.n_hidden)))
    wr.w(f"  wire [{topo.n_hidden * engine.out_bits - 1}:0] hid = {{{hbus}}};")

    wr.w("  // output layer, offset binary (MSB inverted) for unsigned comparison")
    for k in range(topo.n_outputs):
        acc = wr.neuron(f"o{k}", 1, k, W, "hid", engine.out_bits)
        wr.w(f"  wire [{W - 1}:0] u{k} = {{~{acc}[{W - 1}], {acc}[{W - 2}:0]}};")

    if not cfg.include_argmax:
        wr.w(f"  assign scores = {{{', '.join(f'u{k}' for k in reversed(range(topo.n_outputs)))}}};")
        wr.w("endmodule")
        return "\n".join(wr.lines) + "\n"

    wr.w("  // argmax bracket; ties go to the lower class index")
    cands = [(f"u{k}", f"{idx_bits}'d{k}") for k in range(topo.n_outputs)]
    count = 0

    def contest(a, b, kept):
        nonlocal count
        name = f"c{count}"
        count += 1
        (va, ia), (vb, ib) = a, b
        for tag, v in (("a", va), ("b", vb)):
            bits = [f"{v}[{i}]" if i in kept else "1'b0" for i in reversed(range(W))]
            wr.w(f"  wire [{W - 1}:0] {name}_{tag} = {_concat(bits)};")
        wr.w(f"  wire {name}_sel = {{{name}_a, ~{ia}}} > {{{name}_b, ~{ib}}};")
        wr.w(f"  wire [{W - 1}:0] {name}_v = {name}_sel ? {va} : {vb};")
        wr.w(f"  wire [{idx_bits - 1}:0] {name}_i = {name}_sel ? {ia} : {ib};")
        return f"{name}_v", f"{name}_i"

    for stage in plan.stages:
        used = {p for c in stage for p in (c.a, c.b)}
        cands = ([contest(cands[c.a], cands[c.b], c.mask.kept_bits) for c in stage]
                 + [cands[p] for p in range(len(cands)) if p not in used])
    best = cands[0]
    for other in cands[1:]:
        best = contest(other, best, set(range(W)))
    wr.w(f"  assign class_idx = {best[1]};")
    wr.w("endmodule")
    return "\n".join(wr.lines) + "\n"
