from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bespoke_mlp.dataset import QuantizedDataset
from bespoke_mlp.infer import Engine
from bespoke_mlp.nsga2 import (GaConfig, Individual, Problem, crowding_distance, dominates, init_population,
                               non_dominated_sort, nsga2_run, pareto_front, read_front, write_front)

from helpers import random_quant_mlp


def _ind(acc, area, violation=0.0):
    return Individual(np.zeros(1, bool), acc, area, violation)


def test_init_population_anchor_and_keep_rate():
    pop = init_population(400, GaConfig(population_size=50, init_keep_probability=0.9, seed=1))
    assert len(pop) == 50
    assert pop[0].chromosome.all()
    rate = np.mean([p.chromosome.mean() for p in pop[1:]])
    assert 0.87 < rate < 0.93
    again = init_population(400, GaConfig(population_size=50, init_keep_probability=0.9, seed=1))
    assert all(np.array_equal(a.chromosome, b.chromosome) for a, b in zip(pop, again))


def test_dominance_examples():
    assert dominates(_ind(0.9, 10), _ind(0.8, 10))
    assert dominates(_ind(0.9, 10), _ind(0.9, 12))
    assert not dominates(_ind(0.9, 10), _ind(0.9, 10))
    assert not dominates(_ind(0.9, 12), _ind(0.8, 10))
    # feasibility first, then smaller violation
    assert dominates(_ind(0.1, 500), _ind(0.99, 1, violation=0.1))
    assert dominates(_ind(0.5, 9, 0.01), _ind(0.6, 1, 0.02))


def _oracle_ranks(pop) -> list[int]:
    """Repeatedly strip the individuals no remaining one dominates."""
    ranks = [-1] * len(pop)
    remaining = set(range(len(pop)))
    r = 0
    while remaining:
        front = [i for i in remaining if not any(dominates(pop[j], pop[i]) for j in remaining if j != i)]
        for i in front:
            ranks[i] = r
        remaining -= set(front)
        r += 1
    return ranks


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 200), st.integers(0, 2**32 - 1))
def test_sort_agrees_with_quadratic_oracle(n, seed):
    rng = np.random.default_rng(seed)
    pop = [_ind(float(rng.integers(0, 20)) / 20, int(rng.integers(0, 30)),
                float(rng.choice([0.0, 0.0, 0.0, 0.01, 0.02]))) for _ in range(n)]
    fronts = non_dominated_sort(pop)
    assert sorted(i for f in fronts for i in f) == list(range(n))
    assert [p.rank for p in pop] == _oracle_ranks(pop)


def test_crowding_distance():
    pop = [_ind(0.5, 10), _ind(0.6, 20), _ind(0.8, 30), _ind(0.9, 50)]
    crowding_distance(pop, [0, 1, 2, 3])
    assert pop[0].crowding == pop[3].crowding == float("inf")
    assert pop[1].crowding == pytest.approx((0.8 - 0.5) / 0.4 + (30 - 10) / 40)
    assert pop[2].crowding == pytest.approx((0.9 - 0.6) / 0.4 + (50 - 20) / 40)
    two = [_ind(0.5, 1), _ind(0.6, 2)]
    crowding_distance(two, [0, 1])
    assert all(p.crowding == float("inf") for p in two)


def _problem(seed=0, n=300):
    rng = np.random.default_rng(seed)
    m = random_quant_mlp(rng, (5, 3, 3), zero_prob=0.1)
    e = Engine(m)
    x = rng.integers(0, 16, size=(n, 5))
    y = np.where(rng.random(n) < 0.15, rng.integers(0, 3, size=n), e.predict(x))
    return e, QuantizedDataset(x, y, 4)


def _run(**kw):
    e, train = _problem()
    cfg = GaConfig(population_size=kw.pop("population", 40), generations=kw.pop("generations", 8), **kw)
    return nsga2_run(e, None, train, cfg)


def test_front_is_feasible_non_dominated_and_sorted():
    res = _run(accuracy_loss_bound=0.1)
    front = res.front
    assert front
    for a in front:
        assert a.accuracy >= res.baseline_accuracy - 0.1 - 1e-12
        assert not any(dominates(b, a) for b in front)
    assert [p.fa_area for p in front] == sorted(p.fa_area for p in front)
    assert len({p.objectives for p in front}) == len(front)


def test_elitism_best_values_never_regress():
    res = _run(generations=10)
    best_acc = [h["best_accuracy"] for h in res.history]
    best_area = [h["best_area"] for h in res.history]
    assert len(res.history) == 11
    assert all(b >= a for a, b in zip(best_acc, best_acc[1:]))
    assert all(b <= a for a, b in zip(best_area, best_area[1:]))


def test_double_run_gives_byte_identical_front(tmp_path):
    write_front(tmp_path / "a.jsonl", _run(seed=3).front)
    write_front(tmp_path / "b.jsonl", _run(seed=3).front)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    back = read_front(tmp_path / "a.jsonl")
    assert [p.objectives for p in back] == [p.objectives for p in _run(seed=3).front]


def test_zero_generations_returns_initial_front():
    res = _run(generations=0, population=10)
    assert len(res.history) == 1
    assert res.front


def test_problem_rejects_wrong_chromosome_length():
    e, train = _problem()
    with pytest.raises(ValueError):
        Problem(e, train).evaluate(Individual(np.ones(e.n_genes + 1, bool)))


def test_config_validation():
    with pytest.raises(ValueError):
        GaConfig(population_size=0)
    with pytest.raises(ValueError):
        GaConfig(accuracy_loss_bound=1.5)


def test_pareto_front_drops_infeasible_and_duplicates():
    pop = [_ind(0.9, 10), _ind(0.9, 10), _ind(0.95, 5, violation=0.1), _ind(0.8, 5)]
    front = pareto_front(pop)
    assert [p.objectives for p in front] == [(0.8, 5), (0.9, 10)]
