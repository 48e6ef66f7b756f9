"""Approximate argmax: per-comparator bit subsets and minimum-cost pairing.

Operands are the output-neuron values in offset binary (two's complement with
the MSB inverted), so an unsigned comparison orders them correctly. A
comparator keeps a subset of bit positions; dropped positions are forced to
zero in both operands. The winner carries its full value and class index to
the next stage. Equal masked values go to the lower class index, which makes
a full-width plan identical to ``np.argmax`` (lowest index on ties).

Stage ``s`` operates on a candidate list: stage 0 holds the classes in
order, and each following stage holds the winners of the previous stage's
comparators (in comparator order) followed by the pass-through candidate,
if any. Comparator operands ``a``/``b`` are positions in that list.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .dataset import QuantizedDataset
from .infer import Engine, Evaluator
from .mlp import QuantMLP

GUARD = 0.005


@dataclass(frozen=True)
class ComparatorMask:
    kept_bits: frozenset[int]
    width: int

    def __post_init__(self):
        object.__setattr__(self, "kept_bits", frozenset(int(b) for b in self.kept_bits))
        if any(b < 0 or b >= self.width for b in self.kept_bits):
            raise ValueError(f"kept bits {sorted(self.kept_bits)} outside [0, {self.width})")

    @classmethod
    def full(cls, width: int) -> "ComparatorMask":
        return cls(frozenset(range(width)), width)

    @property
    def bits(self) -> int:
        return sum(1 << b for b in self.kept_bits)

    @property
    def cost(self) -> int:
        return len(self.kept_bits)


@dataclass(frozen=True)
class Comparator:
    a: int
    b: int
    mask: ComparatorMask


@dataclass
class ArgmaxPlan:
    width: int
    n_classes: int
    stages: list[list[Comparator]] = field(default_factory=list)

    @property
    def comparators(self) -> list[Comparator]:
        return [c for st in self.stages for c in st]

    @property
    def n_comparators(self) -> int:
        return sum(len(st) for st in self.stages)

    @property
    def kept_bits_total(self) -> int:
        return sum(c.mask.cost for c in self.comparators)

    def width_reduction(self) -> float:
        """Full-width comparator bits over kept comparator bits."""
        if not self.n_comparators:
            return 1.0
        return self.n_comparators * self.width / max(1, self.kept_bits_total)

    def validate(self) -> None:
        n = self.n_classes
        for s, stage in enumerate(self.stages):
            used = [p for c in stage for p in (c.a, c.b)]
            if len(set(used)) != len(used) or any(p < 0 or p >= n for p in used):
                raise ValueError(f"stage {s}: each candidate must appear at most once")
            if any(c.mask.width != self.width for c in stage):
                raise ValueError(f"stage {s}: comparator width differs from plan width")
            n = n - len(stage)

    def predict(self, u: np.ndarray) -> np.ndarray:
        """Class index per sample from offset-binary output values ``u`` [n, C].

        Candidates left after the last stage (a partial plan) are resolved by
        an exact comparison.
        """
        u = np.asarray(u, dtype=np.int64)
        vals = [u[:, k] for k in range(u.shape[1])]
        idx = [np.full(u.shape[0], k, dtype=np.int64) for k in range(u.shape[1])]
        for stage in self.stages:
            vals, idx = _run_stage(stage, vals, idx)
        return _exact_winner(vals, idx)

    def to_json(self) -> dict:
        return {
            "width": self.width,
            "n_classes": self.n_classes,
            "stages": [[{"a": c.a, "b": c.b, "kept_bits": sorted(c.mask.kept_bits)} for c in st]
                       for st in self.stages],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ArgmaxPlan":
        w = int(doc["width"])
        plan = cls(w, int(doc["n_classes"]),
                   [[Comparator(int(c["a"]), int(c["b"]), ComparatorMask(frozenset(c["kept_bits"]), w))
                     for c in st] for st in doc["stages"]])
        plan.validate()
        return plan

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


def full_width_plan(n_classes: int, width: int) -> ArgmaxPlan:
    """In-order bracket with every comparator at full width."""
    stages = []
    n = n_classes
    while n > 1:
        stages.append([Comparator(2 * p, 2 * p + 1, ComparatorMask.full(width)) for p in range(n // 2)])
        n = n - n // 2
    return ArgmaxPlan(width, n_classes, stages)


def _a_wins(va, ia, vb, ib, bits: int):
    ma, mb = va & bits, vb & bits
    return (ma > mb) | ((ma == mb) & (ia < ib))


def _run_stage(stage, vals, idx):
    used = set()
    nv, ni = [], []
    for c in stage:
        w = _a_wins(vals[c.a], idx[c.a], vals[c.b], idx[c.b], c.mask.bits)
        nv.append(np.where(w, vals[c.a], vals[c.b]))
        ni.append(np.where(w, idx[c.a], idx[c.b]))
        used.update((c.a, c.b))
    for p in range(len(vals)):
        if p not in used:
            nv.append(vals[p])
            ni.append(idx[p])
    return nv, ni


def _exact_winner(vals, idx):
    best_v, best_i = vals[0], idx[0]
    for v, i in zip(vals[1:], idx[1:]):
        w = _a_wins(v, i, best_v, best_i, -1)
        best_v, best_i = np.where(w, v, best_v), np.where(w, i, best_i)
    return best_i


# --------------------------------------------------------------------------
# fitting


class _Fitter:
    """Train-set outputs of one (accumulation-approximated) design."""

    def __init__(self, u: np.ndarray, labels: np.ndarray, width: int):
        self.u = np.asarray(u, dtype=np.int64)
        self.labels = labels
        self.width = width
        self.n_classes = self.u.shape[1]

    def candidates(self, stages):
        vals = [self.u[:, k] for k in range(self.n_classes)]
        idx = [np.full(len(self.labels), k, dtype=np.int64) for k in range(self.n_classes)]
        for st in stages:
            vals, idx = _run_stage(st, vals, idx)
        return vals, idx

    def pair_accuracy_fn(self, vals, idx, a: int, b: int):
        """Accuracy as a function of the (a, b) mask, all other comparisons exact."""
        others = [p for p in range(len(vals)) if p not in (a, b)]
        if others:
            rest_i = _exact_winner([vals[p] for p in others], [idx[p] for p in others])
            rest_v = np.zeros_like(vals[a])
            for p in others:
                rest_v = np.where(idx[p] == rest_i, vals[p], rest_v)

        def acc(bits: int) -> float:
            w = _a_wins(vals[a], idx[a], vals[b], idx[b], bits)
            v, i = np.where(w, vals[a], vals[b]), np.where(w, idx[a], idx[b])
            if others:
                keep = _a_wins(v, i, rest_v, rest_i, -1)
                i = np.where(keep, i, rest_i)
            return float(np.mean(i == self.labels))
        return acc

    def greedy(self, acc_fn, reference: float | None = None) -> ComparatorMask:
        kept = set(range(self.width))
        ref = acc_fn(sum(1 << b for b in kept)) if reference is None else reference
        for bit in reversed(range(self.width)):
            trial = kept - {bit}
            if acc_fn(sum(1 << b for b in trial)) >= ref - GUARD:
                kept = trial
        return ComparatorMask(frozenset(kept), self.width)

    def plan_accuracy(self, plan: ArgmaxPlan) -> float:
        return float(np.mean(plan.predict(self.u) == self.labels))


def _context(m: QuantMLP | Engine, mask, train: QuantizedDataset) -> _Fitter:
    engine = m if isinstance(m, Engine) else Engine(m)
    ev = Evaluator(engine, train)
    return _Fitter(engine.offset_binary(ev.outputs(mask)), train.labels, engine.output_width)


def greedy_bit_select(m: QuantMLP | Engine, mask, train: QuantizedDataset, i: int, j: int) -> ComparatorMask:
    """Smallest MSB-first bit subset for comparing output neurons ``i`` and ``j``."""
    if i == j:
        raise ValueError("a comparator needs two distinct neurons")
    fit = _context(m, mask, train)
    vals, idx = fit.candidates([])
    return fit.greedy(fit.pair_accuracy_fn(vals, idx, i, j))


def cost_matrix(fit: _Fitter, stages) -> tuple[np.ndarray, dict]:
    vals, idx = fit.candidates(stages)
    n = len(vals)
    cost = np.full((n, n), math.inf)
    masks = {}
    for i in range(n):
        for j in range(i + 1, n):
            cm = fit.greedy(fit.pair_accuracy_fn(vals, idx, i, j))
            masks[(i, j)] = cm
            cost[i, j] = cost[j, i] = cm.cost
    return cost, masks


def hungarian_assign(c: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost pairing of the candidates of a symmetric cost matrix.

    Each candidate appears in exactly one pair; an odd side is padded with a
    zero-cost dummy whose partner passes through (it is omitted from the
    result). Solved exactly over subsets, which is feasible for the side
    lengths of an output layer (<= 16); a bipartite assignment would not
    guarantee a consistent pairing. Ties resolve to the lexicographically
    smallest pair list. Infinite entries are never selected.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] < 1:
        raise ValueError("cost matrix must be square and non-empty")
    n = c.shape[0]
    if np.any(c < 0):
        raise ValueError("costs must be non-negative")
    if n == 1:
        return []
    size = n + (n % 2)
    full = np.zeros((size, size))
    full[:n, :n] = np.minimum(c, c.T)

    @lru_cache(maxsize=None)
    def solve(remaining: int) -> tuple[float, tuple]:
        if not remaining:
            return 0.0, ()
        i = (remaining & -remaining).bit_length() - 1
        rest = remaining & ~(1 << i)
        best = (math.inf, ())
        r = rest
        while r:
            j = (r & -r).bit_length() - 1
            r &= r - 1
            if math.isinf(full[i, j]):
                continue
            sub_cost, sub = solve(rest & ~(1 << j))
            total = full[i, j] + sub_cost
            if total < best[0]:
                best = (total, ((i, j),) + sub)
        return best

    total, pairs = solve((1 << size) - 1)
    solve.cache_clear()
    if math.isinf(total):
        raise ValueError("no feasible pairing: every completion uses an infinite cost")
    return [(i, j) for i, j in pairs if j < n]


def pairing_cost(c: np.ndarray, pairs) -> float:
    return float(sum(c[i, j] for i, j in pairs))


def build_plan(m: QuantMLP | Engine, mask, train: QuantizedDataset) -> ArgmaxPlan:
    """Fit a comparator bracket on the train set, one stage at a time.

    Per stage: greedy masks for every candidate pair (others exact) give the
    cost matrix, the cheapest pairing fixes the comparators, then each
    comparator's mask is fitted again with all earlier decisions applied,
    guarded against the running accuracy. The train accuracy of the result
    is at least the exact accuracy minus 0.5 points per comparator.
    """
    fit = _context(m, mask, train)
    if fit.n_classes < 2:
        raise ValueError("argmax planning needs at least two outputs")
    plan = ArgmaxPlan(fit.width, fit.n_classes, [])
    n = fit.n_classes
    while n > 1:
        cost, _ = cost_matrix(fit, plan.stages)
        pairs = hungarian_assign(cost)
        stage = [Comparator(a, b, ComparatorMask.full(fit.width)) for a, b in pairs]
        plan.stages.append(stage)
        for k, comp in enumerate(stage):
            def acc_fn(bits, k=k, comp=comp):
                trial = Comparator(comp.a, comp.b, ComparatorMask(
                    frozenset(b for b in range(fit.width) if bits >> b & 1), fit.width))
                stage[k] = trial
                try:
                    return fit.plan_accuracy(plan)
                finally:
                    stage[k] = comp
            stage[k] = Comparator(comp.a, comp.b, fit.greedy(acc_fn))
        n -= len(stage)
    return plan
