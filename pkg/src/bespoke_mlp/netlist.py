"""Gate-level netlist of a bespoke design, used for cost and equivalence checks.

Net 0 is constant zero and net 1 constant one. Cell constructors fold
constants and reuse structurally identical cells, so removed summand bits
and masked comparator bits shrink the circuit the way synthesis would.
Unused logic is dropped by :meth:`Netlist.prune`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adder_tree import carry_save_reduce, ripple_add
from .argmax import ArgmaxPlan, full_width_plan
from .infer import Engine
from .mlp import QuantMLP

ZERO, ONE = 0, 1
CELL_WEIGHTS = {"FA": 2.0, "HA": 1.0, "AND": 0.5, "OR": 0.5, "INV": 0.5, "XOR": 0.5}
_COMMUTATIVE = {"FA", "HA", "AND", "OR", "XOR"}


@dataclass(frozen=True)
class Cell:
    kind: str
    inputs: tuple[int, ...]
    outputs: tuple[int, ...]


@dataclass
class Netlist:
    cells: list[Cell] = field(default_factory=list)
    inputs: dict[str, list[int]] = field(default_factory=dict)
    outputs: dict[str, list[int]] = field(default_factory=dict)
    n_nets: int = 2
    _cache: dict = field(default_factory=dict, repr=False)

    # ---- construction -------------------------------------------------

    def new_net(self) -> int:
        self.n_nets += 1
        return self.n_nets - 1

    def add_input(self, name: str, width: int) -> list[int]:
        nets = [self.new_net() for _ in range(width)]
        self.inputs[name] = nets
        return nets

    def _cell(self, kind: str, ins: tuple[int, ...], n_out: int) -> tuple[int, ...]:
        key = (kind, tuple(sorted(ins)) if kind in _COMMUTATIVE else ins)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        outs = tuple(self.new_net() for _ in range(n_out))
        self.cells.append(Cell(kind, ins, outs))
        self._cache[key] = outs
        return outs

    def inv(self, a: int) -> int:
        if a <= ONE:
            return 1 - a
        hit = self._cache.get(("INV", (a,)))
        if hit:
            return hit[0]
        out = self._cell("INV", (a,), 1)[0]
        self._cache[("INV", (out,))] = (a,)     # double inversion cancels
        return out

    def and_(self, a: int, b: int) -> int:
        if a == ZERO or b == ZERO:
            return ZERO
        if a == ONE:
            return b
        if b == ONE or a == b:
            return a
        return self._cell("AND", (a, b), 1)[0]

    def or_(self, a: int, b: int) -> int:
        if a == ONE or b == ONE:
            return ONE
        if a == ZERO:
            return b
        if b == ZERO or a == b:
            return a
        return self._cell("OR", (a, b), 1)[0]

    def xor(self, a: int, b: int) -> int:
        if a == ZERO:
            return b
        if b == ZERO:
            return a
        if a == ONE:
            return self.inv(b)
        if b == ONE:
            return self.inv(a)
        if a == b:
            return ZERO
        return self._cell("XOR", (a, b), 1)[0]

    def mux(self, sel: int, a: int, b: int) -> int:
        """``a`` when ``sel`` is 1, else ``b``."""
        if a == b:
            return a
        if sel <= ONE:
            return a if sel == ONE else b
        return self.or_(self.and_(sel, a), self.and_(self.inv(sel), b))

    def half_adder(self, a: int, b: int) -> tuple[int, int]:
        if a > b:
            a, b = b, a
        if a == ZERO:
            return b, ZERO
        if a == ONE:
            return (ZERO, ONE) if b == ONE else (self.inv(b), b)
        if a == b:
            return ZERO, a
        s, c = self._cell("HA", (a, b), 2)
        return s, c

    def full_adder(self, a: int, b: int, c: int) -> tuple[int, int]:
        consts = [x for x in (a, b, c) if x <= ONE]
        vars_ = [x for x in (a, b, c) if x > ONE]
        ones = sum(consts)
        if not consts:
            if a == b or a == c or b == c:
                dup = a if a in (b, c) else b
                other = ({a, b, c} - {dup}).pop() if len({a, b, c}) == 2 else dup
                return other, dup           # x+x+y: sum y, carry x
            s, co = self._cell("FA", (a, b, c), 2)
            return s, co
        if len(consts) == 3:
            return ones & 1, int(ones >= 2)
        if len(consts) == 2:
            x = vars_[0]
            return (x, ZERO) if ones == 0 else (self.inv(x), x) if ones == 1 else (x, ONE)
        x, y = vars_
        if ones == 0:
            return self.half_adder(x, y)
        return self.inv(self.xor(x, y)), self.or_(x, y)

    # ---- analysis -----------------------------------------------------

    def prune(self) -> "Netlist":
        """Drop cells whose outputs reach no primary output."""
        live = {n for bus in self.outputs.values() for n in bus}
        kept = []
        for cell in reversed(self.cells):
            if any(o in live for o in cell.outputs):
                kept.append(cell)
                live.update(cell.inputs)
        self.cells = kept[::-1]
        self._cache = {}
        return self

    def cell_counts(self) -> dict[str, int]:
        counts = {k: 0 for k in CELL_WEIGHTS}
        for c in self.cells:
            counts[c.kind] += 1
        return counts

    def weighted_gate_count(self) -> float:
        return float(sum(CELL_WEIGHTS[c.kind] for c in self.cells))

    def check(self) -> None:
        """Every net driven once, cells in topological order."""
        driven = {ZERO, ONE} | {n for bus in self.inputs.values() for n in bus}
        for c in self.cells:
            if any(i not in driven for i in c.inputs):
                raise ValueError(f"cell {c} reads an undriven net")
            if any(o in driven for o in c.outputs):
                raise ValueError(f"cell {c} drives an already-driven net")
            driven.update(c.outputs)
        for name, bus in self.outputs.items():
            if any(n not in driven for n in bus):
                raise ValueError(f"output {name} has an undriven bit")

    def to_json(self) -> dict:
        return {
            "n_nets": self.n_nets,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "cells": [{"kind": c.kind, "in": list(c.inputs), "out": list(c.outputs)} for c in self.cells],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Netlist":
        return cls([Cell(c["kind"], tuple(c["in"]), tuple(c["out"])) for c in doc["cells"]],
                   {k: list(v) for k, v in doc["inputs"].items()},
                   {k: list(v) for k, v in doc["outputs"].items()}, int(doc["n_nets"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))


def simulate_bits(n: Netlist, inputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Bit-parallel evaluation; ``inputs[name]`` is a bool array [n_vectors, width]."""
    vec = None
    val: dict[int, np.ndarray] = {}
    for name, bus in n.inputs.items():
        if name not in inputs:
            raise ValueError(f"missing input bus {name}")
        arr = np.asarray(inputs[name], dtype=bool)
        if arr.ndim != 2 or arr.shape[1] != len(bus):
            raise ValueError(f"input {name} expects width {len(bus)}, got shape {arr.shape}")
        vec = arr.shape[0]
        for k, net in enumerate(bus):
            val[net] = arr[:, k]
    vec = vec or 1
    val[ZERO] = np.zeros(vec, dtype=bool)
    val[ONE] = np.ones(vec, dtype=bool)
    for c in n.cells:
        x = [val[i] for i in c.inputs]
        if c.kind == "FA":
            a, b, ci = x
            val[c.outputs[0]] = a ^ b ^ ci
            val[c.outputs[1]] = (a & b) | (ci & (a ^ b))
        elif c.kind == "HA":
            val[c.outputs[0]] = x[0] ^ x[1]
            val[c.outputs[1]] = x[0] & x[1]
        elif c.kind == "AND":
            val[c.outputs[0]] = x[0] & x[1]
        elif c.kind == "OR":
            val[c.outputs[0]] = x[0] | x[1]
        elif c.kind == "XOR":
            val[c.outputs[0]] = x[0] ^ x[1]
        elif c.kind == "INV":
            val[c.outputs[0]] = ~x[0]
        else:
            raise ValueError(f"unknown cell kind {c.kind}")
    return {name: np.stack([val[b] for b in bus], axis=1) if bus else np.zeros((vec, 0), dtype=bool)
            for name, bus in n.outputs.items()}


def _to_int(bits: np.ndarray) -> np.ndarray:
    return (bits.astype(np.int64) << np.arange(bits.shape[1], dtype=np.int64)).sum(axis=1)


def simulate(n: Netlist, xq: np.ndarray, input_bits: int) -> np.ndarray:
    """Class index per input vector (rows of quantized features)."""
    xq = np.atleast_2d(np.asarray(xq, dtype=np.int64))
    width = len(n.inputs["x"])
    if xq.shape[1] * input_bits != width:
        raise ValueError(f"netlist expects {width // input_bits} features, got {xq.shape[1]}")
    bits = ((xq[:, :, None] >> np.arange(input_bits)) & 1).reshape(len(xq), -1).astype(bool)
    return _to_int(simulate_bits(n, {"x": bits})["class_idx"])


# --------------------------------------------------------------------------
# circuit builders


def _sum_columns(nl: Netlist, columns: list[list[int]]) -> list[int]:
    """Carry-save reduction followed by a ripple adder; LSB-first result bits."""
    reduced, _ = carry_save_reduce(columns, nl.full_adder)
    out = ripple_add(reduced, nl.full_adder, nl.half_adder)
    return [ZERO if b is None else b for b in out]


def _fit(bits: list[int], width: int) -> list[int]:
    # bits at or above the analytic width are provably zero
    return (bits + [ZERO] * width)[:width]


def subtract(nl: Netlist, p: list[int], q: list[int], width: int) -> list[int]:
    """``p - q`` modulo 2**width as ``p + ~q + 1``."""
    p, q = _fit(p, width), _fit(q, width)
    carry, out = ONE, []
    for a, b in zip(p, q):
        s, carry = nl.full_adder(a, nl.inv(b), carry)
        out.append(s)
    return out


def _neuron(nl: Netlist, engine: Engine, layer: int, neuron: int, mask: np.ndarray,
            source_bits: list[list[int]], width: int) -> list[int]:
    """Two's-complement value of one neuron: positive tree minus negative tree."""
    if layer == 0:
        genes, col, sign = engine.hidden_genes, engine.hidden_col, engine.layout.gene_sign[engine.hidden_genes]
        owner, bias = engine.hidden_neuron, int(engine.hidden_bias[neuron])
    else:
        genes, col, sign = engine.output_genes, engine.output_col, engine.layout.gene_sign[engine.output_genes]
        owner, bias = engine.output_neuron, int(engine.output_bias[neuron])
    lay = engine.layout
    trees = {1: [[] for _ in range(width)], -1: [[] for _ in range(width)]}
    for k in np.flatnonzero(owner == neuron):
        g = genes[k]
        net = source_bits[lay.gene_source[g]][lay.gene_bit[g]] if mask[g] else ZERO
        if net != ZERO:
            trees[int(sign[k])][int(col[k])].append(net)
    if bias:
        trees[1 if bias > 0 else -1][abs(bias).bit_length() - 1].append(ONE)
    return subtract(nl, _sum_columns(nl, trees[1]), _sum_columns(nl, trees[-1]), width)


def qrelu_gates(nl: Netlist, d: list[int], shift: int, out_bits: int) -> list[int]:
    """clip(floor(d / 2**shift), 0, 2**out_bits - 1) for a two's-complement ``d``."""
    width = len(d)
    sign = d[-1]
    magnitude = d[:-1]                      # value bits of a non-negative d

    def bit(i):
        return magnitude[i] if 0 <= i < len(magnitude) else ZERO
    overflow = ZERO
    for i in range(max(shift + out_bits, 0), width - 1):
        overflow = nl.or_(overflow, magnitude[i])
    keep = nl.inv(sign)
    return [nl.and_(keep, nl.or_(bit(shift + b), overflow)) for b in range(out_bits)]


def _greater(nl: Netlist, a: list[int], b: list[int]) -> int:
    """Unsigned a > b, LSB-first operands of equal length."""
    gt = ZERO
    for x, y in zip(a, b):
        gt = nl.or_(nl.and_(x, nl.inv(y)), nl.and_(nl.inv(nl.xor(x, y)), gt))
    return gt


def comparator_bracket(nl: Netlist, plan: ArgmaxPlan, values: list[list[int]]) -> list[int]:
    """Binary class index of the bracket winner. ``values`` are offset-binary buses."""
    n = len(values)
    idx_bits = max(1, (n - 1).bit_length())
    cands = [(list(v), [ONE if (k >> b) & 1 else ZERO for b in range(idx_bits)]) for k, v in enumerate(values)]

    def contest(a, b, kept):
        (va, ia), (vb, ib) = a, b
        ka = [nl.inv(x) for x in ia] + [x if i in kept else ZERO for i, x in enumerate(va)]
        kb = [nl.inv(x) for x in ib] + [x if i in kept else ZERO for i, x in enumerate(vb)]
        s = _greater(nl, ka, kb)
        return ([nl.mux(s, x, y) for x, y in zip(va, vb)], [nl.mux(s, x, y) for x, y in zip(ia, ib)])

    for stage in plan.stages:
        used = {p for c in stage for p in (c.a, c.b)}
        cands = ([contest(cands[c.a], cands[c.b], c.mask.kept_bits) for c in stage]
                 + [cands[p] for p in range(len(cands)) if p not in used])
    best = cands[0]
    full = set(range(plan.width))
    for other in cands[1:]:
        best = contest(other, best, full)
    return best[1]


def build_netlist(m: QuantMLP | Engine, chromosome=None, plan: ArgmaxPlan | None = None) -> Netlist:
    engine = m if isinstance(m, Engine) else Engine(m)
    model = engine.model
    mask = engine._check_mask(chromosome)
    topo = model.topology
    nl = Netlist()
    x = nl.add_input("x", topo.n_inputs * model.input_bits)
    feats = [x[i * model.input_bits:(i + 1) * model.input_bits] for i in range(topo.n_inputs)]
    hidden = []
    for j in range(topo.n_hidden):
        d = _neuron(nl, engine, 0, j, mask, feats, int(engine.hidden_width[j]))
        hidden.append(qrelu_gates(nl, d, int(engine.qrelu_shift[j]), engine.out_bits))
    values = []
    for k in range(topo.n_outputs):
        o = _neuron(nl, engine, 1, k, mask, hidden, engine.output_width)
        values.append(o[:-1] + [nl.inv(o[-1])])
    plan = plan or full_width_plan(topo.n_outputs, engine.output_width)
    if plan.width != engine.output_width or plan.n_classes != topo.n_outputs:
        raise ValueError("argmax plan does not match the model's output layer")
    nl.outputs["class_idx"] = comparator_bracket(nl, plan, values)
    nl.prune()
    nl.check()
    return nl


def weighted_gate_count(n: Netlist) -> float:
    return n.weighted_gate_count()
