"""Per-layer average-precision fitting.

Each linear layer is substituted by the two-basis interpolation
y = r*W_l x + (1-r)*W_h x with l = floor(p), h = ceil(p), r = 1 - (p - l),
and the fractional precisions p are the only trainable parameters. Training
minimizes the calibration loss plus a quadratic penalty tying the
parameter-weighted average of p to the target precision. Updates use
decoupled-weight-decay adaptive moments (decay 0 on p) with p clamped to
[b_min, B[i]] and the (l, h) cell re-selected after every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import quant as Q
from .allocator import BitAssignment, InfeasibleError


@dataclass
class InterpCoeffs:
    l: int
    h: int
    r: float    # weight on the low-bit product; 1.0 when p is integral

    @staticmethod
    def from_p(p: float) -> "InterpCoeffs":
        l = int(math.floor(p))
        if p == l:
            return InterpCoeffs(l, l, 1.0)
        return InterpCoeffs(l, l + 1, 1.0 - (p - l))


@dataclass
class PrecisionParams:
    p: dict                     # LayerId -> float
    bounds: dict                # LayerId -> (b_min, B[i])
    target_bits: float
    alpha_reg: float

    def coeffs(self, lid) -> InterpCoeffs:
        return InterpCoeffs.from_p(self.p[lid])

    def avg_precision(self, Mcounts: dict) -> float:
        total = sum(Mcounts[l] for l in self.p)
        return sum(self.p[l] * Mcounts[l] for l in self.p) / total


def interp_forward(layer: Q.QuantizedLayer, coeffs: InterpCoeffs, x):
    """r * gemv(l, x) + (1 - r) * gemv(h, x); single gemv for integral p."""
    if coeffs.r == 1.0 or coeffs.l == coeffs.h:
        return Q.gemv(layer, coeffs.l, x)
    return (coeffs.r * Q.gemv(layer, coeffs.l, x)
            + (1.0 - coeffs.r) * Q.gemv(layer, coeffs.h, x))


def interp_matrix(layer: Q.QuantizedLayer, coeffs: InterpCoeffs) -> np.ndarray:
    if coeffs.r == 1.0 or coeffs.l == coeffs.h:
        return Q.dequantize(layer, coeffs.l)
    return (coeffs.r * Q.dequantize(layer, coeffs.l)
            + (1.0 - coeffs.r) * Q.dequantize(layer, coeffs.h))


def grad_p(layer: Q.QuantizedLayer, coeffs: InterpCoeffs, output_grad, x) -> float:
    """dL/dp for one layer: <dL/dy, (W_h - W_l) x>, summed over tokens.

    Follows from d/dp of the interpolation: the low-bit weight r has slope -1
    in p, so the output moves along (W_h - W_l) x.
    """
    l = coeffs.l
    h = coeffs.h if coeffs.h > coeffs.l else min(coeffs.l + 1, layer.n_bits)
    if h == l:
        return 0.0
    delta = Q.delta_weights(layer, l, h)
    return float(np.sum(np.asarray(output_grad) * (np.asarray(x) @ delta.T)))


def regularized_loss(loss: float, params: PrecisionParams, Mcounts: dict) -> float:
    """loss + alpha * (avg(p) - target)^2, parameter-count weighted."""
    avg = params.avg_precision(Mcounts)
    return loss + params.alpha_reg * (avg - params.target_bits) ** 2


@dataclass
class FitConfig:
    epochs: int = 5
    lr: float = 0.01
    alpha: float = 1.0
    batch_size: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0


def fit(weights: M.ModelWeights, store: Q.BitPlaneStore,
        assignment: BitAssignment, calib, target_bits: float,
        hyper: FitConfig | None = None):
    """Optimize the per-layer average precisions toward the target.

    Returns (PrecisionParams, log) where log holds one
    (epoch, loss, regularizer, avg_precision) row per epoch.
    """
    hyper = hyper or FitConfig()
    samples = list(calib)
    if not samples:
        raise ValueError("empty calibration set")
    lids = M.layer_ids(weights.config)
    Mcounts = store.param_counts()
    total_params = sum(Mcounts[l] for l in lids)
    bounds = {lid: (store.b_min, assignment.bits[lid]) for lid in lids}
    max_avg = sum(bounds[l][1] * Mcounts[l] for l in lids) / total_params
    if not (store.b_min <= target_bits <= max_avg):
        raise InfeasibleError(
            f"target {target_bits} outside feasible range "
            f"[{store.b_min}, {max_avg:.4f}]")

    params = PrecisionParams(
        p={lid: float(np.clip(target_bits, *bounds[lid])) for lid in lids},
        bounds=bounds, target_bits=target_bits, alpha_reg=hyper.alpha)

    trainable = [lid for lid in lids if bounds[lid][1] > bounds[lid][0]]
    m = {lid: 0.0 for lid in trainable}
    v = {lid: 0.0 for lid in trainable}
    t = 0
    rng = np.random.default_rng(hyper.seed)
    log = []

    for epoch in range(hyper.epochs):
        order = rng.permutation(len(samples))
        epoch_loss = 0.0
        for start in range(0, len(order), hyper.batch_size):
            batch = [samples[i] for i in order[start:start + hyper.batch_size]]
            coeffs = {lid: params.coeffs(lid) for lid in lids}
            provider = _interp_provider(store, coeffs)
            grads = {lid: 0.0 for lid in trainable}
            batch_loss = 0.0
            for tokens in batch:
                loss, bundle, tape = M.backward(weights, tokens, provider)
                batch_loss += loss
                inputs = M.layer_inputs(tape)
                for lid in trainable:
                    grads[lid] += grad_p(store.layers[lid], coeffs[lid],
                                         bundle.output_grads[lid], inputs[lid])
            batch_loss /= len(batch)
            epoch_loss += batch_loss * len(batch)
            avg = params.avg_precision(Mcounts)
            reg_slope = 2.0 * hyper.alpha * (avg - target_bits)
            t += 1
            bc1 = 1.0 - hyper.beta1 ** t
            bc2 = 1.0 - hyper.beta2 ** t
            for lid in trainable:
                g = grads[lid] / len(batch) + reg_slope * Mcounts[lid] / total_params
                m[lid] = hyper.beta1 * m[lid] + (1 - hyper.beta1) * g
                v[lid] = hyper.beta2 * v[lid] + (1 - hyper.beta2) * g * g
                step = hyper.lr * (m[lid] / bc1) / (math.sqrt(v[lid] / bc2) + hyper.eps)
                params.p[lid] = float(np.clip(params.p[lid] - step, *bounds[lid]))
        epoch_loss /= len(samples)
        avg = params.avg_precision(Mcounts)
        reg = hyper.alpha * (avg - target_bits) ** 2
        log.append((epoch, epoch_loss, reg, avg))
    return params, log


def _interp_provider(store: Q.BitPlaneStore, coeffs: dict):
    mats = {lid: interp_matrix(store.layers[lid], c) for lid, c in coeffs.items()}
    return lambda lid: mats[lid]


def write_fit_log(log, path: str) -> None:
    with open(path, "w") as f:
        f.write("epoch,loss,regularizer,avg_precision\n")
        for epoch, loss, reg, avg in log:
            f.write(f"{epoch},{loss:.10g},{reg:.10g},{avg:.10g}\n")
