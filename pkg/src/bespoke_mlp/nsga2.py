"""NSGA-II over summand-bit chromosomes: maximize train accuracy, minimize FA area.

Chromosomes whose accuracy falls more than ``accuracy_loss_bound`` (absolute)
below the all-keep baseline are infeasible. Constraint domination applies:
any feasible individual beats any infeasible one, and infeasible individuals
compare by how far they miss the bound.

Randomness for individual ``i`` of generation ``g`` comes from its own stream
seeded by ``(seed, g, i)``, so results never depend on evaluation order.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adder_tree import AdderTreeLayout, chromosome_from_bits, chromosome_to_bits, estimate_area
from .dataset import QuantizedDataset
from .infer import Engine, Evaluator
from .mlp import QuantMLP

log = logging.getLogger(__name__)


@dataclass
class GaConfig:
    population_size: int = 1000
    generations: int = 30
    init_keep_probability: float = 0.9
    mutation_rate: float | None = None      # None: 1 / number of genes
    crossover_rate: float = 0.9
    accuracy_loss_bound: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.population_size < 1 or self.generations < 0:
            raise ValueError("population_size must be positive and generations non-negative")
        for name in ("init_keep_probability", "crossover_rate", "accuracy_loss_bound"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.mutation_rate is not None and not 0.0 <= self.mutation_rate <= 1.0:
            raise ValueError("mutation_rate must lie in [0, 1]")


@dataclass
class Individual:
    chromosome: np.ndarray
    accuracy: float = float("nan")
    fa_area: int = -1
    violation: float = 0.0          # > 0 when infeasible
    rank: int = -1
    crowding: float = 0.0

    @property
    def feasible(self) -> bool:
        return self.violation <= 0.0

    @property
    def objectives(self) -> tuple[float, int]:
        return self.accuracy, self.fa_area

    def to_json(self) -> dict:
        return {"chromosome": chromosome_to_bits(self.chromosome),
                "train_accuracy": self.accuracy, "fa_area": self.fa_area}

    @classmethod
    def from_json(cls, doc: dict) -> "Individual":
        return cls(chromosome_from_bits(doc["chromosome"]), float(doc["train_accuracy"]), int(doc["fa_area"]))


def dominates(a: Individual, b: Individual) -> bool:
    """Constraint domination on (accuracy up, area down)."""
    if a.feasible != b.feasible:
        return a.feasible
    if not a.feasible:
        return a.violation < b.violation
    return (a.accuracy >= b.accuracy and a.fa_area <= b.fa_area
            and (a.accuracy > b.accuracy or a.fa_area < b.fa_area))


def _domination_matrix(pop: list[Individual]) -> np.ndarray:
    acc = np.array([p.accuracy for p in pop])
    area = np.array([p.fa_area for p in pop])
    vio = np.array([max(p.violation, 0.0) for p in pop])
    feas = vio <= 0
    ge = (acc[:, None] >= acc[None, :]) & (area[:, None] <= area[None, :])
    gt = (acc[:, None] > acc[None, :]) | (area[:, None] < area[None, :])
    both = feas[:, None] & feas[None, :]
    dom = np.where(both, ge & gt, False)
    dom |= feas[:, None] & ~feas[None, :]
    dom |= ~feas[:, None] & ~feas[None, :] & (vio[:, None] < vio[None, :])
    return dom


def non_dominated_sort(pop: list[Individual]) -> list[list[int]]:
    """Fronts as index lists; sets ``rank`` on every individual."""
    if not pop:
        return []
    dom = _domination_matrix(pop)
    count = dom.sum(axis=0)                 # how many dominate each individual
    fronts = []
    current = np.flatnonzero(count == 0)
    rank = 0
    while current.size:
        for i in current:
            pop[i].rank = rank
        fronts.append(current.tolist())
        count = count - dom[current].sum(axis=0)
        count[current] = -1
        current = np.flatnonzero(count == 0)
        rank += 1
    return fronts


def crowding_distance(pop: list[Individual], front: list[int]) -> None:
    for i in front:
        pop[i].crowding = 0.0
    if len(front) <= 2:
        for i in front:
            pop[i].crowding = float("inf")
        return
    for key in (lambda p: p.accuracy, lambda p: float(p.fa_area)):
        vals = np.array([key(pop[i]) for i in front])
        order = np.argsort(vals, kind="stable")
        span = vals[order[-1]] - vals[order[0]]
        pop[front[order[0]]].crowding = float("inf")
        pop[front[order[-1]]].crowding = float("inf")
        if span <= 0:
            continue
        for k in range(1, len(front) - 1):
            pop[front[order[k]]].crowding += (vals[order[k + 1]] - vals[order[k - 1]]) / span


def _better(a: Individual, b: Individual) -> bool:
    return a.rank < b.rank or (a.rank == b.rank and a.crowding > b.crowding)


def _rng(seed: int, generation: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, generation, index]))


def init_population(layout: AdderTreeLayout | int, cfg: GaConfig) -> list[Individual]:
    n_genes = layout if isinstance(layout, int) else layout.n_genes
    pop = [Individual(np.ones(n_genes, dtype=bool))]
    for i in range(1, cfg.population_size):
        pop.append(Individual(_rng(cfg.seed, 0, i).random(n_genes) < cfg.init_keep_probability))
    return pop


class Problem:
    """Fitness function: train accuracy of the masked design and its FA estimate."""

    def __init__(self, m: QuantMLP | Engine, train: QuantizedDataset, bound: float = 0.15):
        self.engine = m if isinstance(m, Engine) else Engine(m)
        self.layout = self.engine.layout
        self.evaluator = Evaluator(self.engine, train)
        self.baseline_accuracy = self.evaluator.accuracy()
        self.baseline_area = estimate_area(self.layout, self.layout.all_keep())
        self.bound = bound

    def evaluate(self, ind: Individual) -> Individual:
        if ind.chromosome.shape != (self.layout.n_genes,):
            raise ValueError(f"chromosome has {ind.chromosome.size} genes, layout has {self.layout.n_genes}")
        ind.accuracy = self.evaluator.accuracy(ind.chromosome)
        ind.fa_area = estimate_area(self.layout, ind.chromosome)
        ind.violation = max(0.0, (self.baseline_accuracy - self.bound) - ind.accuracy)
        return ind


def evaluate(ind: Individual, m: QuantMLP | Engine, layout: AdderTreeLayout, train: QuantizedDataset,
             baseline_acc: float, bound: float) -> Individual:
    problem = Problem(m, train, bound)
    problem.baseline_accuracy = baseline_acc
    return problem.evaluate(ind)


def _offspring(pop: list[Individual], cfg: GaConfig, generation: int, index: int, rate: float) -> Individual:
    rng = _rng(cfg.seed, generation, index)
    n = len(pop)

    def tournament():
        a, b = rng.integers(n), rng.integers(n)
        return pop[a] if _better(pop[a], pop[b]) or a == b else pop[b]
    p1, p2 = tournament(), tournament()
    if rng.random() < cfg.crossover_rate:
        child = np.where(rng.random(p1.chromosome.size) < 0.5, p1.chromosome, p2.chromosome)
    else:
        child = p1.chromosome.copy()
    child ^= rng.random(child.size) < rate
    return Individual(child)


def _select(pop: list[Individual], n: int) -> list[Individual]:
    fronts = non_dominated_sort(pop)
    chosen = []
    for front in fronts:
        crowding_distance(pop, front)
        if len(chosen) + len(front) <= n:
            chosen.extend(front)
            continue
        order = sorted(front, key=lambda i: -pop[i].crowding)
        chosen.extend(order[:n - len(chosen)])
        break
    return [pop[i] for i in chosen]


@dataclass
class GaResult:
    front: list[Individual]
    baseline_accuracy: float
    baseline_area: int
    history: list[dict] = field(default_factory=list)


def pareto_front(pop: list[Individual]) -> list[Individual]:
    """Feasible rank-0 individuals, one per objective pair, sorted by area."""
    fronts = non_dominated_sort(pop)
    seen, out = set(), []
    for i in sorted(fronts[0] if fronts else [], key=lambda i: (pop[i].fa_area, -pop[i].accuracy,
                                                                chromosome_to_bits(pop[i].chromosome))):
        p = pop[i]
        if p.feasible and p.objectives not in seen:
            seen.add(p.objectives)
            out.append(p)
    return out


def nsga2_run(m: QuantMLP | Engine | Problem, layout: AdderTreeLayout | None, train: QuantizedDataset | None,
              cfg: GaConfig) -> GaResult:
    problem = m if isinstance(m, Problem) else Problem(m, train, cfg.accuracy_loss_bound)
    problem.bound = cfg.accuracy_loss_bound
    n_genes = problem.layout.n_genes
    if layout is not None and layout.n_genes != n_genes:
        raise ValueError("layout does not match the model")
    rate = cfg.mutation_rate if cfg.mutation_rate is not None else 1.0 / max(n_genes, 1)

    pop = [problem.evaluate(ind) for ind in init_population(n_genes, cfg)]
    pop = _select(pop, cfg.population_size)
    history = [_stats(pop, 0)]
    for g in range(1, cfg.generations + 1):
        kids = [problem.evaluate(_offspring(pop, cfg, g, i, rate)) for i in range(cfg.population_size)]
        pop = _select(pop + kids, cfg.population_size)
        history.append(_stats(pop, g))
        log.info("generation %d: best feasible accuracy %.4f, smallest feasible area %s",
                 g, history[-1]["best_accuracy"], history[-1]["best_area"])
    return GaResult(pareto_front(pop), problem.baseline_accuracy, problem.baseline_area, history)


def _stats(pop: list[Individual], g: int) -> dict:
    feas = [p for p in pop if p.feasible]
    return {"generation": g,
            "best_accuracy": max((p.accuracy for p in feas), default=float("nan")),
            "best_area": min((p.fa_area for p in feas), default=-1),
            "front_size": sum(1 for p in pop if p.rank == 0)}


def write_front(path: str | Path, front: list[Individual]) -> None:
    with open(path, "w") as fh:
        for ind in front:
            fh.write(json.dumps(ind.to_json()) + "\n")


def read_front(path: str | Path) -> list[Individual]:
    return [Individual.from_json(json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]
