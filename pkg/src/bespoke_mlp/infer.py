"""Bit-exact software model of the bespoke circuit.

Each neuron accumulates its positive and negative summands separately on an
integer grid whose LSB is the neuron's smallest weight/bias exponent, the two
sums are subtracted, hidden neurons apply QRelu and the output layer feeds an
argmax (exact, or the comparator bracket of an ArgmaxPlan). A chromosome
masks summand bits: a removed bit is a constant zero in the tree.

A mask is applied as one keep-bitmask per (neuron, source) pair, ANDed with
the source value before its power-of-two weight is applied, so every product
stays an exact int64 operation.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .adder_tree import AdderTreeLayout, build_layout
from .dataset import QuantizedDataset
from .mlp import QuantMLP

_LIMIT = 2 ** 62


def _bitlen(v: int) -> int:
    return int(v).bit_length()


def input_bits_matrix(xq: np.ndarray, bits: int) -> np.ndarray:
    """[n, n_features * bits] 0/1 matrix, feature-major, LSB first."""
    xq = np.asarray(xq, dtype=np.int64)
    if xq.ndim == 1:
        xq = xq[None, :]
    shifts = np.arange(bits, dtype=np.int64)
    return ((xq[:, :, None] >> shifts) & 1).reshape(xq.shape[0], -1).astype(np.float64)


@dataclass(frozen=True)
class NeuronPlan:
    pos_weights: tuple[tuple[int, int], ...]    # (source index, exponent)
    neg_weights: tuple[tuple[int, int], ...]
    bias_sign: int
    bias_exp: int


class Engine:
    """A QuantMLP compiled against its adder-tree layout."""

    def __init__(self, m: QuantMLP, layout: AdderTreeLayout | None = None):
        self.model = m
        self.layout = layout or build_layout(m)
        lay = self.layout
        topo = m.topology
        self.n_hidden, self.n_outputs = topo.n_hidden, topo.n_outputs
        self.out_bits = m.qrelu.out_bits

        # per hidden neuron grid: smallest exponent among its weights and bias
        self.hidden_grid = np.zeros(topo.n_hidden, dtype=np.int64)
        for j in range(topo.n_hidden):
            exps = list(m.w1_exp[j][m.w1_sign[j] != 0])
            if m.b1_sign[j]:
                exps.append(m.b1_exp[j])
            self.hidden_grid[j] = min(exps) if exps else 0
        trunc = m.qrelu.truncate_lsb
        exps = [int(m.w2_exp[k, j] + trunc[j]) for k in range(topo.n_outputs)
                for j in range(topo.n_hidden) if m.w2_sign[k, j]]
        exps += [int(m.b2_exp[k]) for k in range(topo.n_outputs) if m.b2_sign[k]]
        self.output_grid = min(exps) if exps else 0
        self.qrelu_shift = trunc - self.hidden_grid   # accumulator LSBs dropped by QRelu

        layer = lay.gene_layer
        self.hidden_genes = np.flatnonzero(layer == 0)
        self.output_genes = np.flatnonzero(layer == 1)
        hg, og = self.hidden_genes, self.output_genes
        self.hidden_neuron = lay.gene_neuron[hg]
        self.output_neuron = lay.gene_neuron[og]
        self.hidden_col = lay.gene_exponent[hg] - self.hidden_grid[self.hidden_neuron]
        self.output_col = lay.gene_exponent[og] - self.output_grid
        # a mask becomes one keep-bitmask per (neuron, source) weight
        self._hidden_slot = self.hidden_neuron * topo.n_inputs + lay.gene_source[hg]
        self._output_slot = self.output_neuron * topo.n_hidden + lay.gene_source[og]
        self._hidden_bitval = (1 << lay.gene_bit[hg]).astype(np.float64)
        self._output_bitval = (1 << lay.gene_bit[og]).astype(np.float64)
        # integer weight of a whole source value on the neuron grid
        self.hidden_coef = np.where(m.w1_sign != 0, m.w1_sign * np.left_shift(
            1, np.maximum(m.w1_exp - self.hidden_grid[:, None], 0)), 0).astype(np.int64)
        self.output_coef = np.where(m.w2_sign != 0, m.w2_sign * np.left_shift(
            1, np.maximum(m.w2_exp + trunc[None, :] - self.output_grid, 0)), 0).astype(np.int64)

        self.hidden_bias = np.array(
            [m.b1_sign[j] * 2 ** int(m.b1_exp[j] - self.hidden_grid[j]) if m.b1_sign[j] else 0
             for j in range(topo.n_hidden)], dtype=np.int64)
        self.output_bias = np.array(
            [m.b2_sign[k] * 2 ** int(m.b2_exp[k] - self.output_grid) if m.b2_sign[k] else 0
             for k in range(topo.n_outputs)], dtype=np.int64)

        self.hidden_pos_max, self.hidden_neg_max = self._extremes(
            self.hidden_neuron, self.hidden_col, lay.gene_sign[hg], self.hidden_bias, topo.n_hidden)
        self.output_pos_max, self.output_neg_max = self._extremes(
            self.output_neuron, self.output_col, lay.gene_sign[og], self.output_bias, topo.n_outputs)
        if max(self.hidden_pos_max.max(initial=0), self.hidden_neg_max.max(initial=0),
               self.output_pos_max.max(initial=0), self.output_neg_max.max(initial=0)) >= _LIMIT:
            raise OverflowError("accumulator range exceeds 62-bit integers")

    @staticmethod
    def _extremes(neuron, col, sign, bias, n):
        """Worst-case positive/negative accumulator values (all bits set)."""
        pos = np.zeros(n, dtype=object)
        neg = np.zeros(n, dtype=object)
        for nrn, c, s in zip(neuron.tolist(), col.tolist(), sign.tolist()):
            if s > 0:
                pos[nrn] += 1 << c
            else:
                neg[nrn] += 1 << c
        for j in range(n):
            if bias[j] > 0:
                pos[j] += int(bias[j])
            elif bias[j] < 0:
                neg[j] += -int(bias[j])
        return pos.astype(np.int64), neg.astype(np.int64)

    @cached_property
    def hidden_width(self) -> np.ndarray:
        """Two's-complement width of each hidden accumulator difference."""
        return np.array([max(2, 1 + max(_bitlen(p), _bitlen(q))) for p, q in
                         zip(self.hidden_pos_max, self.hidden_neg_max)], dtype=np.int64)

    @cached_property
    def output_width(self) -> int:
        """Common two's-complement width of the output neuron values."""
        return max(2, 1 + max(max(_bitlen(p), _bitlen(q)) for p, q in
                                  zip(self.output_pos_max, self.output_neg_max)))

    @property
    def n_genes(self) -> int:
        return self.layout.n_genes

    def neuron_plan(self, layer: int, neuron: int) -> NeuronPlan:
        m = self.model
        if layer == 0:
            sign, exp, bs, be = m.w1_sign[neuron], m.w1_exp[neuron], m.b1_sign[neuron], m.b1_exp[neuron]
        else:
            sign, exp, bs, be = m.w2_sign[neuron], m.w2_exp[neuron], m.b2_sign[neuron], m.b2_exp[neuron]
        pos = tuple((i, int(exp[i])) for i in range(sign.size) if sign[i] > 0)
        neg = tuple((i, int(exp[i])) for i in range(sign.size) if sign[i] < 0)
        return NeuronPlan(pos, neg, int(bs), int(be))

    def _check_mask(self, mask):
        if mask is None:
            return np.ones(self.n_genes, dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.n_genes,):
            raise ValueError(f"mask has {mask.size} bits, model layout has {self.n_genes}")
        return mask

    def keep_masks(self, mask=None) -> tuple[np.ndarray, np.ndarray]:
        """Per-weight keep-bitmasks: [n_hidden, n_inputs] and [n_outputs, n_hidden]."""
        topo = self.model.topology
        if mask is None:
            return (np.full((topo.n_hidden, topo.n_inputs), (1 << self.model.input_bits) - 1),
                    np.full((topo.n_outputs, topo.n_hidden), (1 << self.out_bits) - 1))
        mask = self._check_mask(mask)
        m1 = np.bincount(self._hidden_slot, self._hidden_bitval * mask[self.hidden_genes],
                         minlength=topo.n_hidden * topo.n_inputs)
        m2 = np.bincount(self._output_slot, self._output_bitval * mask[self.output_genes],
                         minlength=topo.n_outputs * topo.n_hidden)
        return (m1.astype(np.int64).reshape(topo.n_hidden, topo.n_inputs),
                m2.astype(np.int64).reshape(topo.n_outputs, topo.n_hidden))

    def hidden_accumulators(self, xq: np.ndarray, keep: np.ndarray) -> np.ndarray:
        """Exact hidden pre-activations, each on its neuron's grid."""
        return np.einsum("nji,ji->nj", xq[:, None, :] & keep[None], self.hidden_coef) + self.hidden_bias

    def qrelu(self, acc: np.ndarray) -> np.ndarray:
        top = (1 << self.out_bits) - 1
        k = self.qrelu_shift
        pos = np.maximum(acc, 0)
        shifted = np.where(k >= 0, pos >> np.maximum(k, 0), pos << np.maximum(-k, 0))
        return np.minimum(shifted, top)

    def output_values(self, h: np.ndarray, keep: np.ndarray) -> np.ndarray:
        return np.einsum("nkj,kj->nk", h[:, None, :] & keep[None], self.output_coef) + self.output_bias

    def outputs(self, xq: np.ndarray, mask=None) -> np.ndarray:
        xq = np.atleast_2d(np.asarray(xq, dtype=np.int64))
        k1, k2 = self.keep_masks(mask)
        return self.output_values(self.qrelu(self.hidden_accumulators(xq, k1)), k2)

    def offset_binary(self, values: np.ndarray) -> np.ndarray:
        """Output values as the unsigned operands seen by the comparators."""
        return values + (1 << (self.output_width - 1))

    def predict(self, xq: np.ndarray, mask=None, plan=None) -> np.ndarray:
        o = self.outputs(xq, mask)
        if plan is None:
            return np.argmax(o, axis=1)
        return plan.predict(self.offset_binary(o))


class Evaluator:
    """Engine bound to one dataset."""

    def __init__(self, engine: Engine, data: QuantizedDataset):
        if data.n_samples == 0:
            raise ValueError("accuracy of an empty dataset is undefined")
        self.engine = engine
        self.labels = data.labels
        self.features = np.asarray(data.features, dtype=np.int64)

    def outputs(self, mask=None) -> np.ndarray:
        return self.engine.outputs(self.features, mask)

    def predict(self, mask=None, plan=None) -> np.ndarray:
        return self.engine.predict(self.features, mask, plan)

    def accuracy(self, mask=None, plan=None) -> float:
        return float(np.mean(self.predict(mask, plan) == self.labels))


def forward_exact(m: QuantMLP, x: np.ndarray) -> int:
    return int(Engine(m).predict(np.asarray(x)[None, :])[0])


def forward_masked(m: QuantMLP, mask: np.ndarray, x: np.ndarray, plan=None) -> int:
    return int(Engine(m).predict(np.asarray(x)[None, :], mask, plan)[0])


def accuracy(m: QuantMLP | Engine, mask, plan, data: QuantizedDataset) -> float:
    engine = m if isinstance(m, Engine) else Engine(m)
    return Evaluator(engine, data).accuracy(mask, plan)


def export_predictions(path: str | Path, engine: Engine, data: QuantizedDataset, mask=None, plan=None) -> None:
    pred = Evaluator(engine, data).predict(mask, plan)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "label", "prediction"])
        for i, (y, p) in enumerate(zip(data.labels.tolist(), pred.tolist())):
            w.writerow([i, y, p])
