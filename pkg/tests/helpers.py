from __future__ import annotations

import numpy as np

from bespoke_mlp.mlp import E_MAX, E_MIN, QReluConfig, QuantMLP, Topology


def random_quant_mlp(rng: np.random.Generator, topology=(4, 3, 3), input_bits: int = 4,
                     zero_prob: float = 0.2, trunc_max: int = 4) -> QuantMLP:
    topo = Topology(*topology)
    def draw(shape):
        sign = rng.choice([-1, 1], size=shape) * (rng.random(shape) >= zero_prob)
        exp = rng.integers(E_MIN, E_MAX + 1, size=shape)
        return sign, exp
    w1s, w1e = draw((topo.n_hidden, topo.n_inputs))
    b1s, b1e = draw((topo.n_hidden,))
    w2s, w2e = draw((topo.n_outputs, topo.n_hidden))
    b2s, b2e = draw((topo.n_outputs,))
    trunc = rng.integers(0, trunc_max + 1, size=topo.n_hidden)
    return QuantMLP(topo, w1s, w1e, b1s, b1e, w2s, w2e, b2s, b2e, QReluConfig(trunc, 8), input_bits)


def naive_outputs(m: QuantMLP, xq: np.ndarray, mask=None, layout=None) -> np.ndarray:
    """Plain signed integer arithmetic, everything scaled by 2**-E_MIN.

    With a mask, removed input/hidden bits are cleared per (neuron, weight).
    """
    s = -E_MIN
    topo = m.topology
    t = m.qrelu.truncate_lsb
    keep1 = np.ones((topo.n_hidden, topo.n_inputs, m.input_bits), dtype=bool)
    keep2 = np.ones((topo.n_outputs, topo.n_hidden, m.qrelu.out_bits), dtype=bool)
    if mask is not None:
        for g in np.flatnonzero(~np.asarray(mask, dtype=bool)):
            tgt = keep1 if layout.gene_layer[g] == 0 else keep2
            tgt[layout.gene_neuron[g], layout.gene_source[g], layout.gene_bit[g]] = False
    out = []
    for x in np.asarray(xq).tolist():
        h = []
        for j in range(topo.n_hidden):
            acc = int(m.b1_sign[j]) << (int(m.b1_exp[j]) + s)
            for i in range(topo.n_inputs):
                xv = sum(((x[i] >> b) & 1) << b for b in range(m.input_bits) if keep1[j, i, b])
                acc += int(m.w1_sign[j, i]) * (xv << (int(m.w1_exp[j, i]) + s))
            hj = acc >> (int(t[j]) + s)          # floor division
            h.append(min(max(hj, 0), 255))
        row = []
        for k in range(topo.n_outputs):
            acc = int(m.b2_sign[k]) << (int(m.b2_exp[k]) + s)
            for j in range(topo.n_hidden):
                hv = sum(((h[j] >> b) & 1) << b for b in range(m.qrelu.out_bits) if keep2[k, j, b])
                acc += int(m.w2_sign[k, j]) * (hv << (int(m.w2_exp[k, j]) + int(t[j]) + s))
            row.append(acc)
        out.append(row)
    return np.array(out, dtype=object)
