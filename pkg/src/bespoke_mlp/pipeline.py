"""End-to-end flow: data, float training, QAT, accumulation search, argmax plans, HDL.

Every stage reads and writes files in one output directory so the CLI can
run stages separately. The held-out test partition is written to disk by the
first stage and opened exactly once, in the final assessment.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .adder_tree import build_layout, chromosome_from_bits, chromosome_to_bits, estimate_area
from .argmax import ArgmaxPlan, build_plan
from .dataset import (DatasetError, HeldOut, QuantizedDataset, load_csv, load_quantized,
                      normalize_split, quantize_inputs, save_quantized, split_train_test)
from .infer import Engine, Evaluator
from .mlp import FloatMLP, QatConfig, QuantMLP, Topology, TrainConfig, qat_retrain, train_float
from .netlist import build_netlist, simulate
from .nsga2 import GaConfig, Individual, Problem, nsga2_run, read_front, write_front
from .verilog import EmitConfig, emit_verilog, short_hash

log = logging.getLogger(__name__)

DATA_DIR = Path(os.environ.get("BESPOKE_DATA", Path(__file__).resolve().parents[2] / "data"))


@dataclass(frozen=True)
class DatasetEntry:
    file: str
    topology: tuple[int, int, int]
    delimiter: str = ","
    label_col: int = -1
    reference_accuracy: float | None = None    # published float baseline


REGISTRY = {
    "redwine": DatasetEntry("winequality-red.csv", (11, 2, 6), ";", -1, 0.564),
    "whitewine": DatasetEntry("winequality-white.csv", (11, 4, 7), ";", -1, 0.537),
    "cardio": DatasetEntry("cardio.csv", (21, 3, 3), ",", -1, 0.881),
    "breast_cancer": DatasetEntry("breast_cancer.csv", (9, 3, 2), ",", -1, 0.980),
    "pendigits": DatasetEntry("pendigits.csv", (16, 5, 10), ",", -1, 0.937),
}


@dataclass
class RunConfig:
    dataset: str = "redwine"
    label_col: int | None = None
    topology: str | None = None           # "a,b,c"; registry default when None
    seed: int = 0
    population: int = 1000
    generations: int = 30
    acc_bound: float = 0.15
    input_bits: int = 4
    weight_bits: int = 8
    out_dir: str = "runs/redwine"
    max_front_points: int = 20
    train_fraction: float = 0.7
    float_epochs: int = 500
    learning_rate: float = 0.05
    batch_size: int = 32
    qat_epochs: int = 50
    qat_learning_rate: float = 0.001
    report_loss: float = 0.05             # report highlights points within this test-accuracy loss
    equivalence_vectors: int = 10_000

    def validate(self) -> None:
        if self.weight_bits != 8:
            raise ValueError("only 8-bit power-of-two weights (sign and exponent in [-7, 7]) are supported")
        if self.input_bits < 1 or self.max_front_points < 1:
            raise ValueError("input_bits and max_front_points must be positive")
        GaConfig(self.population, self.generations, accuracy_loss_bound=self.acc_bound, seed=self.seed)
        self.dataset_path()

    def entry(self) -> DatasetEntry | None:
        return REGISTRY.get(self.dataset)

    def dataset_path(self) -> Path:
        e = self.entry()
        path = DATA_DIR / e.file if e else Path(self.dataset)
        if not path.is_file():
            hint = " (see data/README.md for where to get it)" if e else ""
            raise DatasetError(f"dataset file not found: {path}{hint}")
        return path

    def resolved_topology(self, n_features: int, n_classes: int) -> Topology:
        if self.topology:
            topo = Topology.parse(self.topology)
        elif self.entry():
            topo = Topology(*self.entry().topology)
        else:
            topo = Topology(n_features, max(2, n_features // 4), n_classes)
        if topo.n_inputs != n_features or topo.n_outputs != n_classes:
            raise ValueError(f"topology {topo.as_tuple()} does not match dataset "
                             f"({n_features} features, {n_classes} classes)")
        return topo

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class ParetoPoint:
    index: int
    chromosome_hash: str
    plan_hash: str
    train_accuracy: float                 # masked design with its argmax plan
    ga_train_accuracy: float              # masked design, exact argmax
    fa_estimate: int
    netlist_gate_count: float
    comparator_width_reduction: float
    verilog: str
    plan: str
    test_accuracy: float | None = None
    pareto: bool = False

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunManifest:
    config: dict
    tool_version: str = __version__
    dataset: dict = field(default_factory=dict)
    topology: list[int] = field(default_factory=list)
    seeds: dict = field(default_factory=dict)
    baselines: dict = field(default_factory=dict)
    points: list[dict] = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """One output directory; each method is one pipeline stage."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.manifest_path = self.out / "manifest.json"

    # ---- helpers -------------------------------------------------------

    def _manifest(self) -> RunManifest:
        if self.manifest_path.is_file():
            return RunManifest.load(self.manifest_path)
        return RunManifest(self.cfg.to_json())

    def _timed(self, stage: str, fn):
        t0 = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:
            raise StageError(stage, exc) from exc
        m = self._manifest()
        m.timings[stage] = round(time.perf_counter() - t0, 3)
        m.save(self.manifest_path)
        log.info("%s done in %.1fs", stage, m.timings[stage])
        return result

    def _require(self, name: str) -> Path:
        p = self.out / name
        if not p.is_file():
            raise FileNotFoundError(f"{p} missing; run the earlier stage first")
        return p

    def train_set(self) -> QuantizedDataset:
        return load_quantized(self._require("train.json"))

    def held_out(self) -> HeldOut:
        return HeldOut(load_quantized(self._require("test.json")))

    def quant_model(self) -> QuantMLP:
        return QuantMLP.load(self._require("quant_model.json"))

    # ---- stages ----------------------------------------------------------

    def train(self) -> FloatMLP:
        cfg = self.cfg
        cfg.validate()
        self.out.mkdir(parents=True, exist_ok=True)

        def stage():
            path = cfg.dataset_path()
            entry = cfg.entry()
            label = cfg.label_col if cfg.label_col is not None else (entry.label_col if entry else -1)
            data = load_csv(path, label, delimiter=entry.delimiter if entry else ",",
                            name=cfg.dataset if entry else None)
            train, test = split_train_test(data, cfg.train_fraction, cfg.seed)
            train, test = normalize_split(train, test)
            qtrain, qtest = quantize_inputs(train, cfg.input_bits), quantize_inputs(test, cfg.input_bits)
            save_quantized(qtrain, self.out / "train.json")
            save_quantized(qtest, self.out / "test.json")
            topo = cfg.resolved_topology(data.n_features, data.n_classes)
            tcfg = TrainConfig(cfg.learning_rate, cfg.float_epochs, cfg.batch_size, seed=cfg.seed)
            fm = train_float(qtrain.dequantize(), topo, tcfg, input_scale=1.0 / ((1 << cfg.input_bits) - 1))
            (self.out / "float_model.json").write_text(json.dumps(fm.to_json()))
            m = RunManifest(cfg.to_json())
            m.dataset = {"name": data.name, "path": str(path), "sha256": _sha256(path),
                         "n_samples": data.n_samples, "n_features": data.n_features,
                         "n_classes": data.n_classes, "n_train": qtrain.n_samples,
                         "n_test": qtest.n_samples,
                         "feature_mins": train.feature_mins.tolist(),
                         "feature_maxs": train.feature_maxs.tolist()}
            m.topology = list(topo.as_tuple())
            m.seeds = {"split": cfg.seed, "train": cfg.seed, "qat": cfg.seed, "ga": cfg.seed,
                       "equivalence": cfg.seed}
            m.baselines = {"float_train_accuracy": fm.accuracy(qtrain.dequantize())}
            m.save(self.manifest_path)
            return fm
        return self._timed("train", stage)

    def quantize(self) -> QuantMLP:
        def stage():
            fm = FloatMLP.from_json(json.loads(self._require("float_model.json").read_text()))
            train = self.train_set()
            qcfg = QatConfig(epochs=self.cfg.qat_epochs, learning_rate=self.cfg.qat_learning_rate,
                             seed=self.cfg.seed)
            qm = qat_retrain(fm, train, qcfg)
            qm.save(self.out / "quant_model.json")
            build_layout(qm).save(self.out / "layout.json")
            m = self._manifest()
            m.baselines["qat_train_accuracy"] = Evaluator(Engine(qm), train).accuracy()
            m.save(self.manifest_path)
            return qm
        return self._timed("quantize", stage)

    def optimize(self) -> list[Individual]:
        def stage():
            qm, train = self.quant_model(), self.train_set()
            ga = GaConfig(self.cfg.population, self.cfg.generations,
                          accuracy_loss_bound=self.cfg.acc_bound, seed=self.cfg.seed)
            result = nsga2_run(Problem(qm, train, ga.accuracy_loss_bound), None, None, ga)
            write_front(self.out / "front.jsonl", result.front)
            m = self._manifest()
            m.baselines.update({"all_keep_train_accuracy": result.baseline_accuracy,
                                "all_keep_fa": result.baseline_area, "front_size": len(result.front)})
            m.save(self.manifest_path)
            (self.out / "ga_history.json").write_text(json.dumps(result.history, indent=1))
            return result.front
        return self._timed("optimize", stage)

    def selected_points(self) -> list[Individual]:
        """Front points to plan and emit: an even spread by area plus the exact design."""
        front = read_front(self._require("front.jsonl"))
        k = self.cfg.max_front_points
        if len(front) > k:
            pick = sorted(set(np.linspace(0, len(front) - 1, k).round().astype(int).tolist()))
            front = [front[i] for i in pick]
        n_genes = front[0].chromosome.size if front else build_layout(self.quant_model()).n_genes
        if not any(p.chromosome.all() for p in front):
            front.append(Individual(np.ones(n_genes, dtype=bool)))
        return front

    def argmax(self) -> list[ArgmaxPlan]:
        def stage():
            qm, train = self.quant_model(), self.train_set()
            engine = Engine(qm)
            (self.out / "plans").mkdir(exist_ok=True)
            plans = []
            for i, ind in enumerate(self.selected_points()):
                plan = build_plan(engine, ind.chromosome, train)
                plan.save(self.out / "plans" / f"point_{i:03d}.json")
                plans.append(plan)
            return plans
        return self._timed("argmax", stage)

    def emit(self) -> list[ParetoPoint]:
        def stage():
            qm, train = self.quant_model(), self.train_set()
            engine = Engine(qm)
            ev = Evaluator(engine, train)
            (self.out / "designs").mkdir(exist_ok=True)
            (self.out / "netlists").mkdir(exist_ok=True)
            vectors = equivalence_vectors(qm.topology.n_inputs, qm.input_bits,
                                          self.cfg.equivalence_vectors, self.cfg.seed)
            points = []
            for i, ind in enumerate(self.selected_points()):
                chrom = ind.chromosome
                plan_path = self._require(f"plans/point_{i:03d}.json")
                plan = ArgmaxPlan.from_json(json.loads(plan_path.read_text()))
                nl = build_netlist(engine, chrom, plan)
                bad = int(np.sum(simulate(nl, vectors, qm.input_bits) != engine.predict(vectors, chrom, plan)))
                if bad:
                    raise AssertionError(f"point {i}: netlist disagrees with the software model on {bad} vectors")
                fa = estimate_area(engine.layout, chrom)
                train_acc = ev.accuracy(chrom, plan)
                text = emit_verilog(engine, chrom, plan, EmitConfig(f"bespoke_mlp_p{i:03d}",
                                                                     train_accuracy=train_acc, fa_estimate=fa))
                vpath = self.out / "designs" / f"point_{i:03d}.v"
                vpath.write_text(text)
                nl.save(self.out / "netlists" / f"point_{i:03d}.json")
                points.append(ParetoPoint(i, short_hash(chromosome_to_bits(chrom)), plan.digest(), train_acc,
                                          ev.accuracy(chrom), fa, nl.weighted_gate_count(),
                                          plan.width_reduction(), str(vpath.relative_to(self.out)),
                                          str(plan_path.relative_to(self.out))))
            self._assess(engine, points)
            return points
        return self._timed("emit", stage)

    def _assess(self, engine: Engine, points: list[ParetoPoint]) -> None:
        """Final assessment: the only place the test partition is read."""
        test = self.held_out().open()
        tev = Evaluator(engine, test)
        chroms = {p.index: ind.chromosome for p, ind in zip(points, self.selected_points())}
        for p in points:
            plan = ArgmaxPlan.from_json(json.loads((self.out / p.plan).read_text()))
            p.test_accuracy = tev.accuracy(chroms[p.index], plan)
        keep = {id(p) for p in pareto_filter(points)}
        for p in points:
            p.pareto = id(p) in keep
        fm = FloatMLP.from_json(json.loads(self._require("float_model.json").read_text()))
        m = self._manifest()
        m.baselines["float_test_accuracy"] = fm.accuracy(test.dequantize())
        m.baselines["qat_test_accuracy"] = tev.accuracy()
        m.points = [p.to_json() for p in points]
        m.save(self.manifest_path)
        write_report(self.out / "report.csv", m)

    def run(self) -> RunManifest:
        self.train()
        self.quantize()
        self.optimize()
        self.argmax()
        self.emit()
        m = self._manifest()
        m.timings["total"] = round(sum(v for k, v in m.timings.items() if k != "total"), 3)
        m.save(self.manifest_path)
        return m


def equivalence_vectors(n_inputs: int, input_bits: int, n: int, seed: int) -> np.ndarray:
    """All inputs when there are at most 2**16, otherwise ``n`` random ones."""
    total_bits = n_inputs * input_bits
    if total_bits <= 16:
        codes = np.arange(1 << total_bits, dtype=np.int64)
        return (codes[:, None] >> (np.arange(n_inputs) * input_bits)) & ((1 << input_bits) - 1)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE0]))
    return rng.integers(0, 1 << input_bits, size=(n, n_inputs))


def pareto_filter(points: list[ParetoPoint]) -> list[ParetoPoint]:
    """Non-dominated under (max test accuracy, min gate count), ascending gate count."""
    out = []
    for p in points:
        dominated = any(
            q.test_accuracy >= p.test_accuracy and q.netlist_gate_count <= p.netlist_gate_count
            and (q.test_accuracy > p.test_accuracy or q.netlist_gate_count < p.netlist_gate_count)
            for q in points)
        if not dominated:
            out.append(p)
    return sorted(out, key=lambda p: p.netlist_gate_count)


REPORT_COLUMNS = ["point", "pareto", "within_loss", "train_accuracy", "test_accuracy", "test_loss",
                  "fa_estimate", "fa_reduction", "gate_count", "comparator_width_reduction",
                  "chromosome_hash", "plan_hash", "verilog"]


def report_rows(m: RunManifest) -> list[dict]:
    base_test = m.baselines.get("qat_test_accuracy", float("nan"))
    base_fa = m.baselines.get("all_keep_fa", 0)
    rows = []
    for p in sorted(m.points, key=lambda p: p["netlist_gate_count"]):
        loss = base_test - p["test_accuracy"]
        rows.append({
            "point": p["index"], "pareto": int(p["pareto"]),
            "within_loss": int(loss <= m.config.get("report_loss", 0.05) + 1e-12),
            "train_accuracy": f"{p['train_accuracy']:.4f}", "test_accuracy": f"{p['test_accuracy']:.4f}",
            "test_loss": f"{loss:.4f}", "fa_estimate": p["fa_estimate"],
            "fa_reduction": f"{base_fa / max(p['fa_estimate'], 1):.2f}" if base_fa else "1.00",
            "gate_count": f"{p['netlist_gate_count']:.1f}",
            "comparator_width_reduction": f"{p['comparator_width_reduction']:.2f}",
            "chromosome_hash": p["chromosome_hash"], "plan_hash": p["plan_hash"], "verilog": p["verilog"],
        })
    return rows


def report_csv(m: RunManifest) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(report_rows(m))
    return buf.getvalue()


def write_report(path: str | Path, m: RunManifest) -> None:
    Path(path).write_text(report_csv(m))


def report_text(m: RunManifest) -> str:
    b = m.baselines
    lines = [f"dataset {m.dataset.get('name')} topology {tuple(m.topology)} seed {m.config.get('seed')}",
             f"float test accuracy {b.get('float_test_accuracy', float('nan')):.4f}, "
             f"QAT test accuracy {b.get('qat_test_accuracy', float('nan')):.4f}, "
             f"all-keep FA {b.get('all_keep_fa')}", ""]
    rows = report_rows(m)
    cols = ["point", "pareto", "within_loss", "test_accuracy", "test_loss", "fa_reduction",
            "gate_count", "comparator_width_reduction"]
    widths = [max(len(c), *(len(str(r[c])) for r in rows)) if rows else len(c) for c in cols]
    lines.append("  ".join(c.rjust(w) for c, w in zip(cols, widths)))
    for r in rows:
        lines.append("  ".join(str(r[c]).rjust(w) for c, w in zip(cols, widths)))
    lines.append("")
    lines.append("stage timings (s): " + ", ".join(f"{k} {v}" for k, v in m.timings.items()))
    return "\n".join(lines) + "\n"


def run_pipeline(cfg: RunConfig | str | Path) -> RunManifest:
    if not isinstance(cfg, RunConfig):
        cfg = RunConfig.load(cfg)
    return Run(cfg).run()
