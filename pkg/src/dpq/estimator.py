"""Relative-error estimators and precision-threshold translation.

The runtime selector needs, per layer, the output gap ||(W_h - W_l) x||
compared against a threshold T. T is the r-quantile of the gap distribution
over the calibration set, with r = 1 - (p - l). Estimators: exact (dense
multiply), linear regression on ||x|| (kept only when R^2 > 0.9), and a
seeded random projection G = A @ dW with optional gradient-descent
calibration of G against the calibration inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import quant as Q

R2_GATE = 0.9
DEFAULT_K = 64
CALIB_EPOCHS = 200
CALIB_STEP = 1e-3

IMMEDIATE = "immediate"
PREVIOUS_RESIDUAL = "previous_residual"


def exact_error(layer: Q.QuantizedLayer, l: int, h: int, x) -> float:
    """||delta_weights(layer, l, h) @ x||_2."""
    return float(np.linalg.norm(Q.delta_weights(layer, l, h) @ np.asarray(x, dtype=np.float64)))


@dataclass
class LinearEstimator:
    slope: float
    intercept: float
    r2: float

    def estimate(self, x) -> float:
        return self.slope * float(np.linalg.norm(x)) + self.intercept

    # ~cols multiply-adds for the norm, plus the affine map
    def op_cost(self, cols: int) -> int:
        return cols + 2


@dataclass
class ProjectionEstimator:
    G: np.ndarray               # (k, cols)
    k: int
    seed: int
    calibrated: bool = False

    def estimate(self, x) -> float:
        return float(np.linalg.norm(self.G @ np.asarray(x, dtype=np.float64)))

    def op_cost(self, cols: int) -> int:
        return self.k * cols


@dataclass
class ExactEstimator:
    layer: Q.QuantizedLayer
    l: int
    h: int

    def estimate(self, x) -> float:
        return exact_error(self.layer, self.l, self.h, x)

    def op_cost(self, cols: int) -> int:
        return self.layer.shape[0] * cols


@dataclass
class ErrorEstimator:
    kind: object                # LinearEstimator | ProjectionEstimator | ExactEstimator
    input_source: str           # IMMEDIATE or PREVIOUS_RESIDUAL
    pair: tuple                 # (l, h)

    def estimate(self, x) -> float:
        return self.kind.estimate(x)


@dataclass
class ThresholdEntry:
    layer: M.LayerId
    T: float                    # may be +/- inf
    r_quantile: float
    pair: tuple


def empirical_quantile(sorted_vals: np.ndarray, r: float) -> float:
    """Ceil-index convention: index ceil(r*n) - 1, clamped to [0, n-1].

    The small tolerance keeps r values that are mathematically on the 1/n
    lattice (e.g. r = 1 - 7/10) from rounding up to the next rank when the
    product r*n lands a few ulps above the integer.
    """
    n = len(sorted_vals)
    idx = min(max(math.ceil(r * n - 1e-9) - 1, 0), n - 1)
    return float(sorted_vals[idx])


def translate_threshold(err_list, p: float, l: int) -> ThresholdEntry:
    """r = 1 - (p - l); T is the empirical r-quantile of the error list.
    r = 1 forces the low bit (+inf sentinel), r = 0 forces the high bit."""
    err_list = np.asarray(err_list, dtype=np.float64)
    if len(err_list) == 0:
        raise ValueError("empty error list")
    if not (l <= p <= l + 1):
        raise ValueError(f"p={p} outside [{l}, {l + 1}]")
    r = 1.0 - (p - l)
    if r >= 1.0:
        T = np.inf
    elif r <= 0.0:
        T = -np.inf
    else:
        T = empirical_quantile(err_list, r)
    return ThresholdEntry(None, T, r, (l, l + 1))


@dataclass
class ErrorSamples:
    errors: np.ndarray          # collection order
    norms: np.ndarray           # paired ||x||
    sorted_errors: np.ndarray
    inputs: np.ndarray          # (n, cols) captured layer inputs


def collect_error_samples(weights: M.ModelWeights, store: Q.BitPlaneStore,
                          pairs: dict, max_bits: dict, calib) -> dict:
    """One exact error per calibration token per layer.

    Forward passes run every layer at its maximum precision B[i]; the
    per-layer gap is measured for that layer's (l, h) pair.
    """
    samples = list(calib)
    if not samples:
        raise ValueError("empty calibration set")
    mats = {lid: Q.dequantize(store.layers[lid], max_bits[lid])
            for lid in store.layers}
    provider = lambda lid: mats[lid]
    per_layer_err = {lid: [] for lid in pairs}
    per_layer_norm = {lid: [] for lid in pairs}
    per_layer_x = {lid: [] for lid in pairs}
    for tokens in samples:
        _, tape = M.forward(weights, tokens, provider, want_tape=True)
        inputs = M.layer_inputs(tape)
        for lid, (l, h) in pairs.items():
            X = inputs[lid]                             # (T, cols)
            delta = Q.delta_weights(store.layers[lid], l, h)
            errs = np.linalg.norm(X @ delta.T, axis=1)
            per_layer_err[lid].append(errs)
            per_layer_norm[lid].append(np.linalg.norm(X, axis=1))
            per_layer_x[lid].append(X)
    out = {}
    for lid in pairs:
        errors = np.concatenate(per_layer_err[lid])
        out[lid] = ErrorSamples(errors,
                                np.concatenate(per_layer_norm[lid]),
                                np.sort(errors),
                                np.concatenate(per_layer_x[lid]))
    return out


def fit_linear(err_list, norm_list):
    """Least-squares error ~ slope*||x|| + intercept; accepted iff R^2 > 0.9.
    Returns a LinearEstimator or None on rejection."""
    err = np.asarray(err_list, dtype=np.float64)
    nrm = np.asarray(norm_list, dtype=np.float64)
    if len(err) < 3:
        return None
    nbar, ebar = nrm.mean(), err.mean()
    sxx = np.sum((nrm - nbar) ** 2)
    sxy = np.sum((nrm - nbar) * (err - ebar))
    if sxx == 0:
        return None
    slope = sxy / sxx
    intercept = ebar - slope * nbar
    resid = err - (slope * nrm + intercept)
    sst = np.sum((err - ebar) ** 2)
    r2 = 1.0 - float(np.sum(resid ** 2) / sst) if sst > 0 else 1.0
    if r2 <= R2_GATE:
        return None
    return LinearEstimator(float(slope), float(intercept), r2)


def build_projection(layer: Q.QuantizedLayer, l: int, h: int, k: int,
                     seed: int, A: np.ndarray | None = None) -> ProjectionEstimator:
    """G = A @ dW with A ~ (1/sqrt(k)) N(0, 1), seeded. An explicit A can be
    passed as a test hook (e.g. a permuted identity for the isometric case)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    delta = Q.delta_weights(layer, l, h)
    if A is None:
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((k, delta.shape[0])) / np.sqrt(k)
    return ProjectionEstimator(A @ delta, k, seed)


def mean_relative_error(est_vals, exact_vals, floor=1e-12) -> float:
    exact_vals = np.maximum(np.asarray(exact_vals, dtype=np.float64), floor)
    return float(np.mean(np.abs(np.asarray(est_vals) - exact_vals) / exact_vals))


def calibrate_projection(est: ProjectionEstimator, inputs, exact_errors,
                         epochs: int = CALIB_EPOCHS, step: float = CALIB_STEP):
    """Gradient descent on G minimizing the squared relative gap between
    ||G x|| and the exact error over the calibration inputs.

    Steps are only accepted if the calibration-set mean relative error does
    not increase (halving the step otherwise), so calibration can never make
    the estimator worse on the calibration set. Five consecutive epochs with
    no acceptable step end the descent early; if the final metric is somehow
    worse than the starting one, the uncalibrated G is restored and the
    warning flag raised.

    Returns (estimator, history of mean relative error per epoch, warning).
    """
    X = np.asarray(inputs, dtype=np.float64)
    e = np.maximum(np.asarray(exact_errors, dtype=np.float64), 1e-12)
    G0 = est.G.copy()
    G = est.G.copy()

    def metric(Gm):
        vals = np.linalg.norm(X @ Gm.T, axis=1)
        return float(np.mean(np.abs(vals - e) / e))

    cur = metric(G)
    history = [cur]
    stuck = 0
    warning = False
    step_cur = step
    for _ in range(epochs):
        proj = X @ G.T                                  # (n, k)
        norms = np.maximum(np.linalg.norm(proj, axis=1), 1e-12)
        coef = 2.0 * (norms - e) / (e * e * norms * len(e))
        grad = (proj * coef[:, None]).T @ X             # (k, cols)
        s = step_cur
        accepted = False
        for _ in range(30):
            cand = G - s * grad
            cand_m = metric(cand)
            if cand_m <= cur:
                G, cur = cand, cand_m
                accepted = True
                # grow the accepted step so flat regions still make progress
                step_cur = s * 2.0
                break
            s *= 0.5
        history.append(cur)
        if accepted:
            stuck = 0
        else:
            stuck += 1
            if stuck >= 5:    # no acceptable step for 5 epochs: converged
                break
    if cur > history[0]:      # defensive: never hand back a worse G
        warning = True
        G = G0
    out = ProjectionEstimator(G, est.k, est.seed, calibrated=True)
    return out, history, warning


def resolve_input_source(lid: M.LayerId) -> str:
    """Residual-fed layers (q, k, v, up) in blocks past the first may estimate
    from the previous input vector; everything else uses the immediate one."""
    if lid.residual_fed and lid.block > 0:
        return PREVIOUS_RESIDUAL
    return IMMEDIATE


def build_estimator(store: Q.BitPlaneStore, lid: M.LayerId, pair: tuple,
                    samples: ErrorSamples, mode: str = "hybrid",
                    k: int = DEFAULT_K, seed: int = 0,
                    calibrate: bool = True, use_async: bool = False) -> ErrorEstimator:
    """Pick the estimator for one layer.

    mode 'exact' uses the dense gap matrix (upper-bound reference). Mode
    'hybrid' keeps the linear fit only when R^2 clears the gate and it beats
    the (calibrated) projection on calibration-set mean relative error.
    """
    l, h = pair
    source = resolve_input_source(lid) if use_async else IMMEDIATE
    qlayer = store.layers[lid]
    if mode == "exact":
        return ErrorEstimator(ExactEstimator(qlayer, l, h), source, pair)
    if mode == "projection":
        proj = build_projection(qlayer, l, h, k, seed)
        if calibrate:
            proj, _, _ = calibrate_projection(proj, samples.inputs, samples.errors)
        return ErrorEstimator(proj, source, pair)
    if mode != "hybrid":
        raise ValueError(f"unknown estimator mode {mode!r}")

    proj = build_projection(qlayer, l, h, k, seed)
    if calibrate:
        proj, _, _ = calibrate_projection(proj, samples.inputs, samples.errors)
    proj_mre = mean_relative_error(
        np.linalg.norm(samples.inputs @ proj.G.T, axis=1), samples.errors)

    linear = fit_linear(samples.errors, samples.norms)
    if linear is not None:
        lin_mre = mean_relative_error(
            linear.slope * samples.norms + linear.intercept, samples.errors)
        if lin_mre <= proj_mre:
            return ErrorEstimator(linear, source, pair)
    return ErrorEstimator(proj, source, pair)
