"""Summand-bit layout of the bespoke adder trees and the full-adder area surrogate.

Every neuron owns two trees (positive and negative weights). A summand is an
input (hidden layer) or a QRelu output (output layer) wired at the column
given by its power-of-two weight, so each nonzero weight contributes exactly
``width`` variable bits. A chromosome is one keep/remove flag per variable bit
over the whole MLP, in (tree, row, column) order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .mlp import QuantMLP


@dataclass(frozen=True)
class SummandBit:
    tree_id: tuple[int, int, int]     # (layer, neuron, sign)
    row: int
    column: int
    kind: str = "variable"            # or "constant_zero"


@dataclass
class Row:
    source: int          # input index (layer 0) or hidden neuron index (layer 1)
    exponent: int        # effective alignment exponent of bit 0 of the summand
    width: int


@dataclass
class Tree:
    layer: int
    neuron: int
    sign: int            # +1 positive tree, -1 negative tree
    rows: list[Row] = field(default_factory=list)

    @property
    def tree_id(self) -> tuple[int, int, int]:
        return (self.layer, self.neuron, self.sign)

    @property
    def shift(self) -> int:
        """Exponent of column 0 (the most negative summand exponent)."""
        return min((r.exponent for r in self.rows), default=0)

    @property
    def n_columns(self) -> int:
        return max((r.exponent - self.shift + r.width for r in self.rows), default=0)

    def columns(self, row: Row) -> range:
        start = row.exponent - self.shift
        return range(start, start + row.width)

    def summand_bits(self) -> list[SummandBit]:
        """Full grid: variable bits plus the constant zeros left by the shifts."""
        out = []
        for r, row in enumerate(self.rows):
            occupied = set(self.columns(row))
            for c in range(self.n_columns):
                out.append(SummandBit(self.tree_id, r, c, "variable" if c in occupied else "constant_zero"))
        return out


@dataclass
class AdderTreeLayout:
    trees: list[Tree]
    # flat per-gene index arrays, canonical order
    gene_tree: np.ndarray = field(init=False)
    gene_row: np.ndarray = field(init=False)
    gene_column: np.ndarray = field(init=False)
    gene_layer: np.ndarray = field(init=False)
    gene_neuron: np.ndarray = field(init=False)
    gene_sign: np.ndarray = field(init=False)
    gene_source: np.ndarray = field(init=False)
    gene_bit: np.ndarray = field(init=False)
    gene_exponent: np.ndarray = field(init=False)

    def __post_init__(self):
        cols = {k: [] for k in ("tree", "row", "column", "layer", "neuron", "sign", "source", "bit", "exponent")}
        for t, tree in enumerate(self.trees):
            for r, row in enumerate(tree.rows):
                for b, c in enumerate(tree.columns(row)):
                    cols["tree"].append(t)
                    cols["row"].append(r)
                    cols["column"].append(c)
                    cols["layer"].append(tree.layer)
                    cols["neuron"].append(tree.neuron)
                    cols["sign"].append(tree.sign)
                    cols["source"].append(row.source)
                    cols["bit"].append(b)
                    cols["exponent"].append(row.exponent + b)
        for k, v in cols.items():
            setattr(self, f"gene_{k}", np.asarray(v, dtype=np.int64))
        self._max_cols = max((t.n_columns for t in self.trees), default=0)

    @property
    def n_genes(self) -> int:
        return int(self.gene_tree.size)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def tree_genes(self, t: int) -> np.ndarray:
        return np.flatnonzero(self.gene_tree == t)

    def all_keep(self) -> np.ndarray:
        return np.ones(self.n_genes, dtype=bool)

    def column_counts(self, chromosome: np.ndarray) -> np.ndarray:
        """Kept variable bits per (tree, column): the L_k of every tree."""
        chromosome = np.asarray(chromosome, dtype=bool)
        if chromosome.shape != (self.n_genes,):
            raise ValueError(f"chromosome has {chromosome.size} genes, layout needs {self.n_genes}")
        flat = self.gene_tree * self._max_cols + self.gene_column
        counts = np.bincount(flat[chromosome], minlength=self.n_trees * self._max_cols)
        return counts.reshape(self.n_trees, self._max_cols)

    def to_json(self) -> dict:
        return {"trees": [
            {"layer": t.layer, "neuron": t.neuron, "sign": t.sign,
             "rows": [[r.source, r.exponent, r.width] for r in t.rows]}
            for t in self.trees]}

    @classmethod
    def from_json(cls, doc: dict) -> "AdderTreeLayout":
        return cls([Tree(t["layer"], t["neuron"], t["sign"], [Row(*r) for r in t["rows"]])
                    for t in doc["trees"]])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))


def build_layout(m: QuantMLP) -> AdderTreeLayout:
    """Two trees per neuron, hidden layer first, positive tree before negative.

    Output-layer summands are the QRelu outputs ``h_j << t_j``; the shift is
    folded into the row exponent.
    """
    topo = m.topology
    trees = []
    for j in range(topo.n_hidden):
        for sign in (1, -1):
            rows = [Row(i, int(m.w1_exp[j, i]), m.input_bits)
                    for i in range(topo.n_inputs) if m.w1_sign[j, i] == sign]
            trees.append(Tree(0, j, sign, rows))
    trunc = m.qrelu.truncate_lsb
    for k in range(topo.n_outputs):
        for sign in (1, -1):
            rows = [Row(j, int(m.w2_exp[k, j] + trunc[j]), m.qrelu.out_bits)
                    for j in range(topo.n_hidden) if m.w2_sign[k, j] == sign]
            trees.append(Tree(1, k, sign, rows))
    return AdderTreeLayout(trees)


def fa_count_column(L_k: int, carry_in_fas: int) -> int:
    """Full adders needed to bring one column down to two bits."""
    return max(0, -(-(L_k + carry_in_fas - 2) // 2))


def _fa_recurrence(counts: np.ndarray) -> np.ndarray:
    """Column-by-column FA recurrence, vectorized over trees; returns per-tree totals."""
    n_trees, n_cols = counts.shape
    total = np.zeros(n_trees, dtype=np.int64)
    carry = np.zeros(n_trees, dtype=np.int64)
    k = 0
    # columns past the last summand still absorb carries until they settle
    while k < n_cols or np.any(carry > 2):
        L = counts[:, k] if k < n_cols else 0
        fa = np.maximum(0, -(-(L + carry - 2) // 2))
        total += fa
        carry = fa
        k += 1
    return total


def estimate_area(layout: AdderTreeLayout, chromosome: np.ndarray) -> int:
    return int(_fa_recurrence(layout.column_counts(chromosome)).sum())


def estimate_area_per_tree(layout: AdderTreeLayout, chromosome: np.ndarray) -> np.ndarray:
    return _fa_recurrence(layout.column_counts(chromosome))


def estimate_area_batch(layout: AdderTreeLayout, chromosomes: np.ndarray) -> np.ndarray:
    return np.array([estimate_area(layout, c) for c in np.atleast_2d(chromosomes)], dtype=np.int64)


# --------------------------------------------------------------------------
# carry-save reduction schedule shared by the oracle and the netlist builder


def carry_save_reduce(columns: Sequence[Sequence], full_adder: Callable,
                      ) -> tuple[list[list], int]:
    """Stage-parallel reduction of bit columns to at most two bits each.

    In every stage each column with more than two bits feeds disjoint triples
    into full adders; sums stay in the column and carries land one column up,
    both becoming available in the next stage. ``full_adder(a, b, c)`` returns
    ``(sum, carry)``. Returns the reduced columns and the stage count.
    """
    cols = [list(c) for c in columns]
    stages = 0
    while any(len(c) > 2 for c in cols):
        stages += 1
        nxt = [[] for _ in range(len(cols) + 1)]
        for k, col in enumerate(cols):
            n_fa = min(len(col) // 3, -(-(len(col) - 2) // 2)) if len(col) > 2 else 0
            for f in range(n_fa):
                s, c = full_adder(*col[3 * f:3 * f + 3])
                nxt[k].append(s)
                nxt[k + 1].append(c)
            nxt[k].extend(col[3 * n_fa:])
        while nxt and not nxt[-1]:
            nxt.pop()
        cols = nxt
    return cols, stages


def ripple_add(columns: Sequence[Sequence], full_adder: Callable, half_adder: Callable,
               ) -> list:
    """Final carry-propagate addition of columns holding at most two bits.

    Returns one bit per column plus any final carry. Columns with two bits
    and no carry use a half adder.
    """
    out = []
    carry = None
    for col in columns:
        bits = list(col) + ([carry] if carry is not None else [])
        if len(bits) > 3:
            raise ValueError("ripple_add expects reduced columns")
        carry = None
        if not bits:
            out.append(None)
        elif len(bits) == 1:
            out.append(bits[0])
        elif len(bits) == 2:
            s, carry = half_adder(*bits)
            out.append(s)
        else:
            s, carry = full_adder(*bits)
            out.append(s)
    if carry is not None:
        out.append(carry)
    return out


@dataclass(frozen=True)
class ReductionCounts:
    fa: int          # full adders of the reduction stages
    ha: int          # half adders (final carry-propagate adder)
    stages: int
    cpa_fa: int = 0  # full adders of the final carry-propagate adder


def reduction_oracle(heights: Sequence[int]) -> ReductionCounts:
    """Count adders by actually running the reduction on placeholder bits.

    ``heights[k]`` is the number of kept bits in column k of one tree.
    """
    counter = {"fa": 0, "ha": 0}

    def fa(a, b, c):
        counter["fa"] += 1
        return object(), object()

    def ha(a, b):
        counter["ha"] += 1
        return object(), object()

    cols = [[object() for _ in range(h)] for h in heights]
    reduced, stages = carry_save_reduce(cols, fa)
    reduction_fa = counter["fa"]
    ripple_add(reduced, fa, ha)
    return ReductionCounts(reduction_fa, counter["ha"], stages, counter["fa"] - reduction_fa)


def tree_heights(layout: AdderTreeLayout, chromosome: np.ndarray, t: int) -> list[int]:
    counts = layout.column_counts(chromosome)[t]
    return [int(v) for v in counts[:layout.trees[t].n_columns]]


def chromosome_to_bits(c: np.ndarray) -> str:
    return "".join("1" if v else "0" for v in np.asarray(c, dtype=bool))


def chromosome_from_bits(s: str) -> np.ndarray:
    return np.array([ch == "1" for ch in s], dtype=bool)
