"""Acceptance criteria, one PASS/FAIL line each (see the summary at the end of the run).

Criteria that name a dataset fail with a "data missing" line when its CSV is
not in data/. Criteria scoped to the datasets that were run (QAT drop,
comparator width) are scored over the available ones and list the rest.
Every pipeline run here uses population 200 and 30 generations.
"""
from __future__ import annotations

import json
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import spearmanr

from bespoke_mlp.adder_tree import estimate_area, reduction_oracle, tree_heights
from bespoke_mlp.argmax import GUARD, ArgmaxPlan, Comparator, ComparatorMask, full_width_plan, hungarian_assign
from bespoke_mlp.dataset import Dataset, HeldOut, QuantizedDataset, normalize_split, split_train_test
from bespoke_mlp.infer import Engine, Evaluator
from bespoke_mlp.mlp import E_MAX, E_MIN, QReluConfig, QuantMLP, po2_quantize
from bespoke_mlp.netlist import Netlist, build_netlist, simulate
from bespoke_mlp.nsga2 import dominates, non_dominated_sort, read_front
from bespoke_mlp.pipeline import DATA_DIR, REGISTRY, Run, RunConfig, RunManifest, equivalence_vectors

from conftest import ACCEPTANCE_LINES
from helpers import random_quant_mlp
from test_adder_tree import _random_layout
from test_argmax import _brute_force
from test_nsga2 import _ind, _oracle_ranks

MANDATORY = ("redwine", "whitewine", "cardio", "breast_cancer")
AVAILABLE = [name for name, e in REGISTRY.items() if (DATA_DIR / e.file).is_file()]


def record(criterion: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}")
    assert ok, detail


def info(criterion: str, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"INFO {criterion}: {detail}")


def _missing(name: str) -> str:
    return f"{name}: data missing ({REGISTRY[name].file} not in {DATA_DIR}; see data/README.md)"


# ---- shared pipeline runs ------------------------------------------------------


class RunResult:
    def __init__(self, name: str, run: Run, manifest: RunManifest, seconds: float):
        self.name, self.run, self.manifest, self.seconds = name, run, manifest, seconds
        self.engine = Engine(run.quant_model())
        self.train = run.train_set()

    def points(self):
        return list(zip(self.manifest.points, self.run.selected_points()))


def _run(name: str, out_dir) -> RunResult:
    cfg = RunConfig(dataset=name, seed=0, population=200, generations=30, acc_bound=0.15,
                    out_dir=str(out_dir), max_front_points=20)
    run = Run(cfg)
    t0 = time.perf_counter()
    m = run.run()
    return RunResult(name, run, m, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def runs(tmp_path_factory) -> dict[str, RunResult]:
    return {name: _run(name, tmp_path_factory.mktemp(name)) for name in AVAILABLE}


# ---- 1: float baselines ----------------------------------------------------------


@pytest.mark.parametrize("name", list(REGISTRY))
def test_c1_float_baseline(name, runs):
    ref = REGISTRY[name].reference_accuracy
    if name not in runs:
        if name in MANDATORY:
            record(f"C1 float baseline {name}", False, _missing(name))
        info(f"C1 float baseline {name} (optional)", _missing(name))
        return
    r = runs[name]
    acc = r.manifest.baselines["float_test_accuracy"]
    secs = r.manifest.timings["train"]
    detail = f"test accuracy {acc:.4f} vs {ref:.3f} (tolerance 0.05), training {secs:.1f}s (limit 120s)"
    if name not in MANDATORY:
        info(f"C1 float baseline {name} (optional)", detail)
        return
    record(f"C1 float baseline {name}", abs(acc - ref) <= 0.05 and secs < 120, detail)


# ---- 2: QAT drop --------------------------------------------------------------------


def _qat_drop(r: RunResult) -> float:
    return 100 * (r.manifest.baselines["float_test_accuracy"] - r.manifest.baselines["qat_test_accuracy"])


@pytest.mark.parametrize("name", list(REGISTRY))
def test_c2_qat_drop_per_dataset(name, runs):
    # the criterion covers the datasets that were run; a missing file is reported, not scored
    if name not in runs:
        info(f"C2 QAT drop {name}", f"not run, {_missing(name)}")
        return
    drop = _qat_drop(runs[name])
    record(f"C2 QAT drop {name}", drop <= 8.0, f"{drop:.2f} points (limit 8)")


def test_c2_qat_drop_average(runs):
    if not runs:
        record("C2 QAT drop average", False, "no dataset available")
    drops = {n: _qat_drop(r) for n, r in runs.items()}
    avg = float(np.mean(list(drops.values())))
    missing = [n for n in REGISTRY if n not in runs]
    record("C2 QAT drop average", avg <= 5.0,
           f"average {avg:.2f} points over run datasets {sorted(drops)} (limit 5)"
           + (f"; not run for lack of data: {missing}" if missing else ""))


# ---- 3: estimator vs oracle ---------------------------------------------------------


def test_c3_estimator_matches_oracle():
    rng = np.random.default_rng(12345)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(500):
        lay = _random_layout(rng)
        c = rng.random(lay.n_genes) < rng.uniform(0.3, 1.0)
        bad += estimate_area(lay, c) != reduction_oracle(tree_heights(lay, c, 0)).fa
    secs = time.perf_counter() - t0
    record("C3 estimate_area == oracle", bad == 0 and secs < 30,
           f"{bad} mismatches on 500 layouts (<= 8 rows x 12 columns) in {secs:.1f}s (limit 30s)")


# ---- 4: estimator fidelity ----------------------------------------------------------


def test_c4_spearman_fidelity(runs):
    t0 = time.perf_counter()
    results = {}
    for name, r in runs.items():
        rng = np.random.default_rng(0)
        e = r.engine
        fa, gates = [], []
        for _ in range(200):
            c = rng.random(e.n_genes) < rng.uniform(0.0, 1.0)
            fa.append(estimate_area(e.layout, c))
            gates.append(build_netlist(e, c).weighted_gate_count())
        results[name] = float(spearmanr(fa, gates).statistic)
    secs = time.perf_counter() - t0
    good = [n for n, rho in results.items() if rho >= 0.9]
    detail = ", ".join(f"{n} rho={rho:.3f}" for n, rho in results.items()) + f" (200 chromosomes each), {secs:.0f}s"
    record("C4 Spearman(estimate, gate count) >= 0.9 on >= 2 datasets", len(good) >= 2 and secs < 600, detail)


# ---- 5: pairing -------------------------------------------------------------------


def test_c5_pairing_matches_brute_force():
    rng = np.random.default_rng(99)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(100):
        n = int(rng.integers(2, 9))
        a = rng.integers(0, 30, size=(n, n)).astype(float)
        c = np.minimum(a, a.T)
        np.fill_diagonal(c, np.inf)
        pairs = hungarian_assign(c)
        bad += sum(c[i, j] for i, j in pairs) != _brute_force(c)
    secs = time.perf_counter() - t0
    record("C5 pairing == brute force", bad == 0 and secs < 10,
           f"{bad} mismatches on 100 matrices up to 8x8 in {secs:.2f}s (limit 10s)")


# ---- 6: netlist equivalence ----------------------------------------------------------


def test_c6_netlist_equivalence(runs):
    if not runs:
        record("C6 netlist == software model", False, "no dataset available")
    lines = []
    total_bad = 0
    for name, r in runs.items():
        m = r.engine.model
        vec = equivalence_vectors(m.topology.n_inputs, m.input_bits, 10_000, 0)
        for p, ind in r.points():
            plan = ArgmaxPlan.from_json(json.loads((r.run.out / p["plan"]).read_text()))
            nl = Netlist.from_json(json.loads((r.run.out / "netlists" / f"point_{p['index']:03d}.json").read_text()))
            total_bad += int(np.count_nonzero(simulate(nl, vec, m.input_bits) != r.engine.predict(vec, ind.chromosome, plan)))
        lines.append(f"{name} {len(r.manifest.points)} points x {len(vec)} vectors")
    record("C6 netlist == software model", total_bad == 0, f"{total_bad} mismatches; " + "; ".join(lines))


# ---- 7: search quality on RedWine --------------------------------------------------


def _best_fa_reduction(r: RunResult, max_loss: float) -> tuple[float, float]:
    base_acc = r.manifest.baselines["all_keep_train_accuracy"]
    base_fa = r.manifest.baselines["all_keep_fa"]
    best = (1.0, 0.0)
    for ind in read_front(r.run.out / "front.jsonl"):
        loss = base_acc - ind.accuracy
        if loss <= max_loss + 1e-12:
            best = max(best, (base_fa / max(ind.fa_area, 1), loss))
    return best


def test_c7_redwine_fa_reduction(runs):
    for name, r in runs.items():
        red, loss = _best_fa_reduction(r, 0.02)
        info(f"C7 {name}", f"best FA reduction {red:.2f}x at {100 * loss:.2f} points train loss, "
                           f"pipeline {r.seconds:.0f}s")
    if "redwine" not in runs:
        record("C7 RedWine >= 2x FA reduction at <= 2 points loss", False, _missing("redwine"))
    r = runs["redwine"]
    red, loss = _best_fa_reduction(r, 0.02)
    record("C7 RedWine >= 2x FA reduction at <= 2 points loss", red >= 2.0 and r.seconds < 600,
           f"{red:.2f}x at {100 * loss:.2f} points, pipeline {r.seconds:.0f}s (limit 600s)")


# ---- 8: approximate argmax ----------------------------------------------------------


def _guard_violations(plan: ArgmaxPlan, ev: Evaluator, mask) -> int:
    """Re-apply the comparators one at a time; each may cost at most GUARD."""
    stages = [[Comparator(c.a, c.b, ComparatorMask.full(plan.width)) for c in st] for st in plan.stages]
    prev = ev.accuracy(mask, ArgmaxPlan(plan.width, plan.n_classes, stages))
    bad = 0
    for s, st in enumerate(plan.stages):
        for k, c in enumerate(st):
            stages[s][k] = c
            acc = ev.accuracy(mask, ArgmaxPlan(plan.width, plan.n_classes, stages))
            bad += acc < prev - GUARD - 1e-12
            prev = acc
    return bad


def test_c8_comparator_width_reduction(runs):
    good, lines, guard_bad, exact_bad = [], [], 0, 0
    for name, r in runs.items():
        ev = Evaluator(r.engine, r.train)
        reductions = []
        for p, ind in r.points():
            plan = ArgmaxPlan.from_json(json.loads((r.run.out / p["plan"]).read_text()))
            guard_bad += _guard_violations(plan, ev, ind.chromosome)
            reductions.append(plan.width_reduction())
            full = full_width_plan(plan.n_classes, plan.width)
            exact_bad += int(np.count_nonzero(ev.predict(ind.chromosome, full) != ev.predict(ind.chromosome)))
        avg = float(np.mean(reductions))
        lines.append(f"{name} average {avg:.2f}x over {len(reductions)} points")
        if avg >= 2.0:
            good.append(name)
    missing = [n for n in REGISTRY if n not in runs]
    ok = bool(runs) and len(good) * 2 >= len(runs) and guard_bad == 0 and exact_bad == 0
    detail = (f"{len(good)} of {len(runs)} run datasets >= 2x ({'; '.join(lines)}), "
              f"{guard_bad} guard violations, {exact_bad} full-width mismatches"
              + (f"; not run for lack of data: {missing}" if missing else ""))
    record("C8 comparator width reduction >= 2x on half the run datasets", ok, detail)


def test_c8_full_width_plan_is_exact():
    rng = np.random.default_rng(5)
    bad = 0
    for n_classes in range(2, 11):
        u = rng.integers(0, 1 << 12, size=(2000, n_classes))
        u[:200, 1:] = u[:200, :1]              # ties
        bad += int(np.count_nonzero(full_width_plan(n_classes, 12).predict(u) != np.argmax(u, axis=1)))
    record("C8 full-width plan == exact argmax", bad == 0, f"{bad} mismatches over 2 to 10 classes")


# ---- 9: fronts, sorting, determinism --------------------------------------------------


def test_c9_fronts_non_dominated(runs):
    bad = 0
    for r in runs.values():
        front = read_front(r.run.out / "front.jsonl")
        bad += sum(dominates(a, b) for a in front for b in front)
    record("C9 fronts mutually non-dominated", bool(runs) and bad == 0,
           f"{bad} dominated pairs across {len(runs)} fronts")


def test_c9_sort_matches_oracle():
    rng = np.random.default_rng(3)
    bad = 0
    for _ in range(50):
        n = int(rng.integers(1, 201))
        pop = [_ind(float(rng.integers(0, 40)) / 40, int(rng.integers(0, 60)),
                    float(rng.choice([0.0, 0.0, 0.0, 0.01, 0.03]))) for _ in range(n)]
        non_dominated_sort(pop)
        bad += [p.rank for p in pop] != _oracle_ranks(pop)
    record("C9 non-dominated sort == O(n^2) oracle", bad == 0, f"{bad} disagreements on 50 populations <= 200")


def test_c9_double_run_identical(runs, tmp_path):
    name = "breast_cancer" if "breast_cancer" in runs else next(iter(runs), None)
    if name is None:
        record("C9 double run byte-identical front.jsonl", False, "no dataset available")
    again = _run(name, tmp_path / "again")
    same = (runs[name].run.out / "front.jsonl").read_bytes() == (again.run.out / "front.jsonl").read_bytes()
    record("C9 double run byte-identical front.jsonl", same, f"{name}, population 200, 30 generations")


# ---- 10: property suites ----------------------------------------------------------


def _property(name: str, fn) -> None:
    try:
        fn()
    except Exception as exc:                          # noqa: BLE001 - reported, then re-raised
        record(f"C10 {name}", False, f"counterexample: {exc!r}")
        raise
    record(f"C10 {name}", True, "1000 cases")


def test_c10_property_suites():
    @settings(max_examples=1000, deadline=None, database=None)
    @given(st.floats(-1e6, 1e6, allow_nan=False))
    def po2(w):
        q = po2_quantize(w)
        assert po2_quantize(q.value) == q
        assert q.sign == 0 or E_MIN <= q.exponent <= E_MAX

    @settings(max_examples=1000, deadline=None, database=None)
    @given(st.integers(-2**40, 2**40), st.integers(0, 2**20), st.integers(0, 12))
    def qrelu(a, step, t):
        q = QReluConfig(np.array([t]), 8)
        lo, hi = q.apply(np.array([a]))[0], q.apply(np.array([a + step]))[0]
        assert 0 <= lo <= hi <= 255

    @settings(max_examples=1000, deadline=None, database=None)
    @given(st.integers(0, 2**32 - 1))
    def all_keep(seed):
        rng = np.random.default_rng(seed)
        e = Engine(random_quant_mlp(rng, (4, 3, 3)))
        x = rng.integers(0, 16, size=(16, 4))
        assert np.array_equal(e.predict(x, e.layout.all_keep()), e.predict(x))

    @settings(max_examples=1000, deadline=None, database=None)
    @given(st.integers(0, 2**31 - 1), st.integers(4, 60))
    def hygiene(seed, n):
        rng = np.random.default_rng(seed)
        d = Dataset(rng.normal(size=(n, 2)), rng.integers(0, 2, size=n))
        tr, te = split_train_test(d, 0.7, seed)
        assert not set(tr.row_ids) & set(te.row_ids)
        a, _ = normalize_split(tr, te)
        b, _ = normalize_split(tr, Dataset(te.features * -50, te.labels))
        assert np.array_equal(a.features, b.features)
        sealed = HeldOut(QuantizedDataset(np.zeros((1, 1), int), np.zeros(1, int), 4))
        with pytest.raises(PermissionError):
            sealed.labels

    for name, fn in (("po2 idempotence and exponent range", po2),
                     ("QRelu range and monotonicity", qrelu),
                     ("all-keep mask == exact", all_keep),
                     ("test-set hygiene", hygiene)):
        _property(name, fn)
