"""Float baseline training, power-of-two weight quantization, QRelu fitting and QAT.

Integer-domain convention used everywhere downstream: the hardware sees the
raw quantized inputs ``x_q`` (0 .. 2**B - 1), a hidden pre-activation is the
exact dyadic number ``a = sum(x_q * 2**e) + bias``, QRelu produces
``h = clip(floor(a / 2**t), 0, 2**out_bits - 1)`` and the output layer
consumes ``h << t`` so that ``t`` only moves the truncation point, never the
output scale.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Dataset, QuantizedDataset

log = logging.getLogger(__name__)

E_MIN, E_MAX = -7, 7
# magnitudes below half the smallest representable power (in log domain) become zero
ZERO_THRESHOLD = 2.0 ** (E_MIN - 0.5)


@dataclass(frozen=True)
class Topology:
    n_inputs: int
    n_hidden: int
    n_outputs: int

    def __post_init__(self):
        if min(self.n_inputs, self.n_hidden, self.n_outputs) < 1:
            raise ValueError(f"topology sizes must be positive: {self}")

    @classmethod
    def parse(cls, text: str) -> "Topology":
        parts = [int(p) for p in str(text).replace("(", "").replace(")", "").split(",")]
        if len(parts) != 3:
            raise ValueError(f"topology must be 'inputs,hidden,outputs', got {text!r}")
        return cls(*parts)

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.n_inputs, self.n_hidden, self.n_outputs)


@dataclass(frozen=True)
class Po2Weight:
    sign: int
    exponent: int = 0

    @property
    def value(self) -> float:
        return float(self.sign) * 2.0 ** self.exponent if self.sign else 0.0


def po2_quantize(w: float) -> Po2Weight:
    if not np.isfinite(w):
        raise ValueError("po2_quantize needs a finite value")
    mag = abs(w)
    if mag < ZERO_THRESHOLD:
        return Po2Weight(0, 0)
    exp = int(np.floor(np.log2(mag) + 0.5))
    return Po2Weight(1 if w > 0 else -1, min(max(exp, E_MIN), E_MAX))


def po2_quantize_array(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`po2_quantize`; returns (sign, exponent) int arrays."""
    w = np.asarray(w, dtype=np.float64)
    mag = np.abs(w)
    nz = mag >= ZERO_THRESHOLD
    with np.errstate(divide="ignore"):
        exp = np.floor(np.log2(np.where(nz, mag, 1.0)) + 0.5)
    exp = np.clip(exp, E_MIN, E_MAX).astype(np.int64)
    sign = np.where(nz, np.sign(w), 0).astype(np.int64)
    return sign, np.where(nz, exp, 0)


def po2_value(sign: np.ndarray, exp: np.ndarray) -> np.ndarray:
    return sign * np.exp2(exp.astype(np.float64))


@dataclass
class FloatMLP:
    topology: Topology
    w1: np.ndarray          # [n_hidden, n_inputs]
    b1: np.ndarray
    w2: np.ndarray          # [n_outputs, n_hidden]
    b2: np.ndarray
    # model input = hardware input x_q * input_scale
    input_scale: float = 1.0

    def __post_init__(self):
        t = self.topology
        if self.w1.shape != (t.n_hidden, t.n_inputs) or self.w2.shape != (t.n_outputs, t.n_hidden):
            raise ValueError("weight shapes do not match topology")
        if self.b1.shape != (t.n_hidden,) or self.b2.shape != (t.n_outputs,):
            raise ValueError("bias shapes do not match topology")

    def logits(self, x: np.ndarray) -> np.ndarray:
        z = np.maximum(x @ self.w1.T + self.b1, 0.0)
        return z @ self.w2.T + self.b2

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def accuracy(self, d: Dataset) -> float:
        return float(np.mean(self.predict(d.features) == d.labels))

    def to_json(self) -> dict:
        return {
            "topology": list(self.topology.as_tuple()),
            "input_scale": self.input_scale,
            "layers": [
                {"weights": self.w1.tolist(), "biases": self.b1.tolist()},
                {"weights": self.w2.tolist(), "biases": self.b2.tolist()},
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FloatMLP":
        l1, l2 = doc["layers"]
        return cls(Topology(*doc["topology"]), np.array(l1["weights"], float), np.array(l1["biases"], float),
                   np.array(l2["weights"], float), np.array(l2["biases"], float),
                   float(doc.get("input_scale", 1.0)))


@dataclass
class QReluConfig:
    truncate_lsb: np.ndarray          # per hidden neuron, >= 0
    out_bits: int = 8

    @property
    def max_value(self) -> int:
        return (1 << self.out_bits) - 1

    def apply(self, a: np.ndarray) -> np.ndarray:
        """Reference QRelu on real pre-activations (exact for dyadic inputs)."""
        h = np.floor(np.asarray(a, dtype=np.float64) / np.exp2(self.truncate_lsb))
        return np.clip(h, 0, self.max_value).astype(np.int64)


@dataclass
class QuantMLP:
    topology: Topology
    w1_sign: np.ndarray
    w1_exp: np.ndarray
    b1_sign: np.ndarray
    b1_exp: np.ndarray
    w2_sign: np.ndarray
    w2_exp: np.ndarray
    b2_sign: np.ndarray
    b2_exp: np.ndarray
    qrelu: QReluConfig
    input_bits: int = 4

    def __post_init__(self):
        for name in ("w1_sign", "w1_exp", "b1_sign", "b1_exp", "w2_sign", "w2_exp", "b2_sign", "b2_exp"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        self.qrelu.truncate_lsb = np.asarray(self.qrelu.truncate_lsb, dtype=np.int64)
        t = self.topology
        if self.w1_sign.shape != (t.n_hidden, t.n_inputs) or self.w2_sign.shape != (t.n_outputs, t.n_hidden):
            raise ValueError("weight shapes do not match topology")
        if self.qrelu.truncate_lsb.shape != (t.n_hidden,):
            raise ValueError("one truncate_lsb per hidden neuron required")
        # exponents of zero weights are normalized so equality/serialization is canonical
        for s, e in (("w1_sign", "w1_exp"), ("b1_sign", "b1_exp"), ("w2_sign", "w2_exp"), ("b2_sign", "b2_exp")):
            sign, exp = getattr(self, s), getattr(self, e)
            if np.any((exp < E_MIN) | (exp > E_MAX)):
                raise ValueError(f"{e} outside [{E_MIN}, {E_MAX}]")
            setattr(self, e, np.where(sign == 0, 0, exp))

    def weight(self, layer: int, row: int, col: int) -> Po2Weight:
        sign, exp = (self.w1_sign, self.w1_exp) if layer == 0 else (self.w2_sign, self.w2_exp)
        return Po2Weight(int(sign[row, col]), int(exp[row, col]))

    def bias(self, layer: int, row: int) -> Po2Weight:
        sign, exp = (self.b1_sign, self.b1_exp) if layer == 0 else (self.b2_sign, self.b2_exp)
        return Po2Weight(int(sign[row]), int(exp[row]))

    @property
    def w1(self) -> np.ndarray:
        return po2_value(self.w1_sign, self.w1_exp)

    @property
    def b1(self) -> np.ndarray:
        return po2_value(self.b1_sign, self.b1_exp)

    @property
    def w2(self) -> np.ndarray:
        return po2_value(self.w2_sign, self.w2_exp)

    @property
    def b2(self) -> np.ndarray:
        return po2_value(self.b2_sign, self.b2_exp)

    def hidden_preactivation(self, xq: np.ndarray) -> np.ndarray:
        return np.asarray(xq, dtype=np.float64) @ self.w1.T + self.b1

    def to_json(self) -> dict:
        def pairs(sign, exp):
            return np.stack([sign, exp], axis=-1).tolist()
        return {
            "topology": list(self.topology.as_tuple()),
            "input_bits": self.input_bits,
            "qrelu": {"out_bits": self.qrelu.out_bits, "truncate_lsb": self.qrelu.truncate_lsb.tolist()},
            "layers": [
                {"weights": pairs(self.w1_sign, self.w1_exp), "biases": pairs(self.b1_sign, self.b1_exp)},
                {"weights": pairs(self.w2_sign, self.w2_exp), "biases": pairs(self.b2_sign, self.b2_exp)},
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "QuantMLP":
        topo = Topology(*doc["topology"])
        l1, l2 = doc["layers"]

        def split(pairs, shape):
            a = np.asarray(pairs, dtype=np.int64).reshape(*shape, 2)
            return a[..., 0], a[..., 1]
        w1s, w1e = split(l1["weights"], (topo.n_hidden, topo.n_inputs))
        b1s, b1e = split(l1["biases"], (topo.n_hidden,))
        w2s, w2e = split(l2["weights"], (topo.n_outputs, topo.n_hidden))
        b2s, b2e = split(l2["biases"], (topo.n_outputs,))
        q = doc["qrelu"]
        return cls(topo, w1s, w1e, b1s, b1e, w2s, w2e, b2s, b2e,
                   QReluConfig(np.asarray(q["truncate_lsb"], dtype=np.int64), int(q["out_bits"])),
                   int(doc["input_bits"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "QuantMLP":
        return cls.from_json(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# training core, shared by the float baseline and QAT


@dataclass
class QuantSpec:
    """How latent float parameters map onto the integer-domain network.

    With ``po2=False`` and ``qrelu=False`` the forward pass is the float
    network up to a positive rescaling of the logits, which is what makes the
    straight-through gradients comparable to plain float gradients.
    """
    input_scale: float = 1.0
    hidden_shift: int = 0          # hidden layer scaled by 2**hidden_shift
    output_shift: int = 0          # logits scaled by 2**output_shift
    truncate_lsb: np.ndarray | None = None
    out_bits: int = 8
    po2: bool = True
    qrelu: bool = True

    def trunc(self, n_hidden: int) -> np.ndarray:
        if self.truncate_lsb is None:
            return np.zeros(n_hidden, dtype=np.int64)
        return np.asarray(self.truncate_lsb, dtype=np.int64)


FLOAT_SPEC = QuantSpec(po2=False, qrelu=False)


def _effective(params: dict, spec: QuantSpec) -> dict:
    s1, s2 = 2.0 ** spec.hidden_shift, 2.0 ** spec.output_shift
    raw = {
        "w1": params["w1"] * (spec.input_scale * s1),
        "b1": params["b1"] * s1,
        "w2": params["w2"] * (s2 / s1),
        "b2": params["b2"] * s2,
    }
    if spec.po2:
        return {k: po2_value(*po2_quantize_array(v)) for k, v in raw.items()}
    return raw


def loss_and_grads(params: dict, x: np.ndarray, y: np.ndarray, spec: QuantSpec,
                   want_grads: bool = True) -> tuple[float, dict]:
    """Softmax cross-entropy and straight-through gradients w.r.t. latent params."""
    eff = _effective(params, spec)
    n_hidden = params["w1"].shape[0]
    t = np.exp2(spec.trunc(n_hidden).astype(np.float64))
    a = x @ eff["w1"].T + eff["b1"]
    if spec.qrelu:
        h = np.clip(np.floor(a / t), 0, (1 << spec.out_bits) - 1)
        active = (a > 0) & (a / t < (1 << spec.out_bits))
    else:
        h = np.maximum(a, 0.0) / t
        active = a > 0
    s = h * t
    o = s @ eff["w2"].T + eff["b2"]
    logits = o / 2.0 ** spec.output_shift
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    n = len(y)
    loss = float(-np.mean(np.log(p[np.arange(n), y] + 1e-300)))
    if not want_grads:
        return loss, {}

    dlogits = p
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    do = dlogits / 2.0 ** spec.output_shift
    s1, s2 = 2.0 ** spec.hidden_shift, 2.0 ** spec.output_shift
    grads = {
        "w2": (do.T @ s) * (s2 / s1),
        "b2": do.sum(axis=0) * s2,
    }
    da = (do @ eff["w2"]) * active
    grads["w1"] = (da.T @ x) * (spec.input_scale * s1)
    grads["b1"] = da.sum(axis=0) * s1
    return loss, grads


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 500
    batch_size: int = 32
    momentum: float = 0.0
    seed: int = 0
    optimizer: str = "sgd"


def _init_params(topo: Topology, rng: np.random.Generator) -> dict:
    lim1 = np.sqrt(6.0 / topo.n_inputs)
    lim2 = np.sqrt(6.0 / topo.n_hidden)
    return {
        "w1": rng.uniform(-lim1, lim1, size=(topo.n_hidden, topo.n_inputs)),
        "b1": np.full(topo.n_hidden, 0.01),
        "w2": rng.uniform(-lim2, lim2, size=(topo.n_outputs, topo.n_hidden)),
        "b2": np.zeros(topo.n_outputs),
    }


def _sgd(params: dict, x: np.ndarray, y: np.ndarray, spec: QuantSpec, cfg: TrainConfig,
         score) -> tuple[dict, float]:
    """Mini-batch gradient descent (plain/momentum or Adam); keeps the
    parameters with the best score() seen at epoch boundaries."""
    rng = np.random.default_rng(cfg.seed + 1)
    best = {k: v.copy() for k, v in params.items()}
    best_score = score(params)
    m1 = {k: np.zeros_like(v) for k, v in params.items()}
    m2 = {k: np.zeros_like(v) for k, v in params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    n = len(y)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(params, x[idx], y[idx], spec)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            step += 1
            for k in params:
                g = grads[k]
                if cfg.optimizer == "adam":
                    m1[k] = b1 * m1[k] + (1 - b1) * g
                    m2[k] = b2 * m2[k] + (1 - b2) * g * g
                    mhat = m1[k] / (1 - b1 ** step)
                    vhat = m2[k] / (1 - b2 ** step)
                    params[k] = params[k] - cfg.learning_rate * mhat / (np.sqrt(vhat) + eps)
                else:
                    m1[k] = cfg.momentum * m1[k] - cfg.learning_rate * g
                    params[k] = params[k] + m1[k]
        current = score(params)
        if current > best_score:
            best_score = current
            best = {k: v.copy() for k, v in params.items()}
    return best, best_score


def train_float(train: Dataset, topology: Topology, cfg: TrainConfig | None = None,
                input_scale: float = 1.0) -> FloatMLP:
    """Train the float baseline on ``train.features`` (already in model-input units)."""
    cfg = cfg or TrainConfig()
    if train.n_features != topology.n_inputs:
        raise ValueError(f"dataset has {train.n_features} features, topology expects {topology.n_inputs}")
    rng = np.random.default_rng(cfg.seed)
    params = _init_params(topology, rng)
    x, y = np.asarray(train.features, dtype=np.float64), train.labels

    def score(p):
        z = np.maximum(x @ p["w1"].T + p["b1"], 0.0)
        return float(np.mean(np.argmax(z @ p["w2"].T + p["b2"], axis=1) == y))

    best, acc = _sgd(params, x, y, FLOAT_SPEC, cfg, score)
    log.info("float training done: train accuracy %.4f", acc)
    return FloatMLP(topology, best["w1"], best["b1"], best["w2"], best["b2"], input_scale)


# --------------------------------------------------------------------------
# quantization


def fit_qrelu(m: QuantMLP, train: QuantizedDataset, out_bits: int = 8,
              percentile: float = 99.0) -> QReluConfig:
    """Per hidden neuron, the smallest truncation whose kept window covers the
    given percentile of the positive train-set pre-activations."""
    a = m.hidden_preactivation(train.features)
    top = 1 << out_bits
    trunc = np.zeros(m.topology.n_hidden, dtype=np.int64)
    for j in range(m.topology.n_hidden):
        pos = a[:, j][a[:, j] > 0]
        if pos.size == 0:
            continue
        level = np.percentile(pos, percentile)
        t = 0
        while level >= top * 2.0 ** t:
            t += 1
        trunc[j] = t
    return QReluConfig(trunc, out_bits)


def _layer_shift(magnitude: float) -> int:
    """Power-of-two rescale putting ``magnitude`` just inside the exponent range."""
    if magnitude <= 0:
        return 0
    return int(np.floor(E_MAX + 0.5 - np.log2(magnitude)))


def choose_shifts(m: FloatMLP) -> tuple[int, int]:
    """Hidden/output power-of-two rescales that exploit the full exponent range.

    Relu layers are positively homogeneous and argmax is scale free, so both
    rescales leave the float function unchanged.
    """
    s1 = _layer_shift(max(np.abs(m.w1).max() * m.input_scale, np.abs(m.b1).max()))
    hidden_mag = np.abs(m.w2).max() * 2.0 ** -s1
    s2 = _layer_shift(max(hidden_mag, np.abs(m.b2).max()))
    return s1, s2


def _to_quant(params: dict, spec: QuantSpec, topo: Topology, trunc: np.ndarray,
              out_bits: int, input_bits: int) -> QuantMLP:
    s1, s2 = 2.0 ** spec.hidden_shift, 2.0 ** spec.output_shift
    w1s, w1e = po2_quantize_array(params["w1"] * spec.input_scale * s1)
    b1s, b1e = po2_quantize_array(params["b1"] * s1)
    w2s, w2e = po2_quantize_array(params["w2"] * s2 / s1)
    b2s, b2e = po2_quantize_array(params["b2"] * s2)
    return QuantMLP(topo, w1s, w1e, b1s, b1e, w2s, w2e, b2s, b2e,
                    QReluConfig(np.asarray(trunc, dtype=np.int64), out_bits), input_bits)


def quant_predict(m: QuantMLP, xq: np.ndarray) -> np.ndarray:
    """Integer-domain prediction via float64 arithmetic (exact for dyadic values)."""
    h = m.qrelu.apply(m.hidden_preactivation(xq))
    o = (h * np.exp2(m.qrelu.truncate_lsb)) @ m.w2.T + m.b2
    return np.argmax(o, axis=1)


@dataclass
class QatConfig:
    epochs: int = 50
    learning_rate: float = 0.001
    batch_size: int = 32
    momentum: float = 0.0
    seed: int = 0
    optimizer: str = "adam"
    out_bits: int = 8
    shifts: tuple[int, int] | None = None   # None: choose_shifts()


def qat_retrain(m: FloatMLP, train: QuantizedDataset, cfg: QatConfig | None = None) -> QuantMLP:
    """Quantization-aware retraining with po2 weights and QRelu in the loop.

    Forward passes use the quantized integer-domain network, gradients pass
    the quantizers as identity. The returned model is the one with the best
    quantized train accuracy seen (epoch 0 = plain post-training quantization).
    """
    cfg = cfg or QatConfig()
    topo = m.topology
    if train.n_features != topo.n_inputs:
        raise ValueError("dataset width does not match topology")
    shifts = cfg.shifts if cfg.shifts is not None else choose_shifts(m)
    spec = QuantSpec(m.input_scale, shifts[0], shifts[1], None, cfg.out_bits)
    params = {"w1": m.w1.copy(), "b1": m.b1.copy(), "w2": m.w2.copy(), "b2": m.b2.copy()}

    provisional = _to_quant(params, spec, topo, np.zeros(topo.n_hidden), cfg.out_bits, train.input_bits)
    qrelu = fit_qrelu(provisional, train, cfg.out_bits)
    spec.truncate_lsb = qrelu.truncate_lsb
    x = train.features.astype(np.float64)
    y = train.labels

    def score(p):
        qm = _to_quant(p, spec, topo, qrelu.truncate_lsb, cfg.out_bits, train.input_bits)
        return float(np.mean(quant_predict(qm, train.features) == y))

    tcfg = TrainConfig(cfg.learning_rate, cfg.epochs, cfg.batch_size, cfg.momentum, cfg.seed, cfg.optimizer)
    best, acc = _sgd(params, x, y, spec, tcfg, score)
    qm = _to_quant(best, spec, topo, qrelu.truncate_lsb, cfg.out_bits, train.input_bits)
    if acc < 1.0 / max(train.n_classes, 1):
        warnings.warn(f"QAT accuracy {acc:.3f} is below chance level", RuntimeWarning)
    log.info("QAT done: quantized train accuracy %.4f (shifts %s)", acc, shifts)
    return qm
