import numpy as np
import pytest

from dpq import estimator as E
from dpq import model as M
from dpq import quant as Q


def test_empirical_quantile_convention():
    vals = np.array([1.0, 2.0, 3.0, 4.0])
    assert E.empirical_quantile(vals, 0.25) == 1.0
    assert E.empirical_quantile(vals, 0.5) == 2.0
    assert E.empirical_quantile(vals, 0.75) == 3.0
    assert E.empirical_quantile(vals, 1.0) == 4.0
    assert E.empirical_quantile(vals, 0.0) == 1.0


def test_translate_threshold_interior():
    errs = np.arange(1, 101, dtype=np.float64)
    entry = E.translate_threshold(errs, 3.25, 3)
    assert np.isclose(entry.r_quantile, 0.75)
    assert entry.T == 75.0


def test_translate_threshold_sentinels():
    errs = np.array([1.0, 2.0])
    assert E.translate_threshold(errs, 3.0, 3).T == np.inf
    assert E.translate_threshold(errs, 4.0, 3).T == -np.inf
    with pytest.raises(ValueError):
        E.translate_threshold(errs, 4.5, 3)
    with pytest.raises(ValueError):
        E.translate_threshold(np.array([]), 3.5, 3)


def test_exact_error(toy_store):
    lid = M.LayerId(0, "q")
    x = np.random.default_rng(0).normal(size=32)
    got = E.exact_error(toy_store.layers[lid], 3, 4, x)
    expect = np.linalg.norm(
        (Q.dequantize(toy_store.layers[lid], 4)
         - Q.dequantize(toy_store.layers[lid], 3)) @ x)
    assert np.isclose(got, expect)


def test_fit_linear_accepts_proportional():
    rng = np.random.default_rng(1)
    norms = rng.uniform(1, 10, 200)
    errs = 0.7 * norms + 0.05 * rng.normal(size=200)
    est = E.fit_linear(errs, norms)
    assert est is not None
    assert est.r2 > E.R2_GATE
    assert np.isclose(est.slope, 0.7, atol=0.05)


def test_fit_linear_rejects_noise():
    rng = np.random.default_rng(2)
    norms = rng.uniform(1, 10, 200)
    errs = rng.uniform(1, 10, 200)      # unrelated to the norm
    assert E.fit_linear(errs, norms) is None
    assert E.fit_linear([1.0, 2.0], [1.0, 2.0]) is None   # too few
    assert E.fit_linear([1.0, 2.0, 3.0], [5.0, 5.0, 5.0]) is None


def test_projection_seeded_and_deterministic(toy_store):
    lid = M.LayerId(0, "up")
    a = E.build_projection(toy_store.layers[lid], 3, 4, 16, seed=5)
    b = E.build_projection(toy_store.layers[lid], 3, 4, 16, seed=5)
    assert np.array_equal(a.G, b.G)
    c = E.build_projection(toy_store.layers[lid], 3, 4, 16, seed=6)
    assert not np.array_equal(a.G, c.G)
    with pytest.raises(ValueError):
        E.build_projection(toy_store.layers[lid], 3, 4, 0, seed=0)


def test_projection_isometric_hook(toy_store):
    # an orthonormal A makes ||Gx|| equal ||dW x|| exactly
    lid = M.LayerId(0, "q")
    layer = toy_store.layers[lid]
    rows = layer.shape[0]
    A = np.eye(rows)
    est = E.build_projection(layer, 3, 4, rows, seed=0, A=A)
    x = np.random.default_rng(3).normal(size=layer.shape[1])
    assert np.isclose(est.estimate(x), E.exact_error(layer, 3, 4, x))


def test_calibration_never_worse_on_calibration_set(toy_store):
    lid = M.LayerId(0, "q")
    layer = toy_store.layers[lid]
    rng = np.random.default_rng(4)
    X = rng.normal(size=(64, layer.shape[1]))
    exact = np.linalg.norm(X @ Q.delta_weights(layer, 3, 4).T, axis=1)
    proj = E.build_projection(layer, 3, 4, 8, seed=0)
    out, history, warning = E.calibrate_projection(proj, X, exact)
    assert history[-1] <= history[0] + 1e-12
    assert not warning
    assert out.calibrated


def test_calibration_single_input_converges(toy_store):
    lid = M.LayerId(0, "q")
    layer = toy_store.layers[lid]
    x = np.random.default_rng(5).normal(size=layer.shape[1])
    exact = np.array([E.exact_error(layer, 3, 4, x)])
    proj = E.build_projection(layer, 3, 4, 8, seed=0)
    out, history, _ = E.calibrate_projection(proj, x[None, :], exact)
    assert history[-1] < 0.01


def test_resolve_input_source():
    assert E.resolve_input_source(M.LayerId(0, "q")) == E.IMMEDIATE
    assert E.resolve_input_source(M.LayerId(1, "q")) == E.PREVIOUS_RESIDUAL
    assert E.resolve_input_source(M.LayerId(1, "up")) == E.PREVIOUS_RESIDUAL
    assert E.resolve_input_source(M.LayerId(1, "o")) == E.IMMEDIATE
    assert E.resolve_input_source(M.LayerId(1, "down")) == E.IMMEDIATE


def _samples(toy_weights, toy_store, toy_calib, lid, pair):
    max_bits = {l: 6 for l in toy_store.layers}
    return E.collect_error_samples(toy_weights, toy_store, {lid: pair},
                                   max_bits, toy_calib)[lid]


def test_collect_error_samples(toy_weights, toy_store, toy_calib):
    lid = M.LayerId(1, "down")
    s = _samples(toy_weights, toy_store, toy_calib, lid, (3, 4))
    n = sum(len(t) for t in toy_calib)
    assert s.errors.shape == (n,)
    assert s.norms.shape == (n,)
    assert s.inputs.shape == (n, 64)
    assert np.array_equal(np.sort(s.errors), s.sorted_errors)
    # spot-check one row against the dense gap
    delta = Q.delta_weights(toy_store.layers[lid], 3, 4)
    assert np.isclose(s.errors[0], np.linalg.norm(delta @ s.inputs[0]))


def test_build_estimator_modes(toy_weights, toy_store, toy_calib):
    lid = M.LayerId(0, "v")
    s = _samples(toy_weights, toy_store, toy_calib, lid, (3, 4))
    exact = E.build_estimator(toy_store, lid, (3, 4), s, mode="exact")
    assert isinstance(exact.kind, E.ExactEstimator)
    hybrid = E.build_estimator(toy_store, lid, (3, 4), s, mode="hybrid",
                               k=8, calibrate=False)
    assert isinstance(hybrid.kind, (E.LinearEstimator, E.ProjectionEstimator))
    assert hybrid.input_source == E.IMMEDIATE
    with_async = E.build_estimator(toy_store, lid, (3, 4), s, mode="exact",
                                   use_async=True)
    assert with_async.input_source == E.IMMEDIATE   # block 0 stays immediate
    lid1 = M.LayerId(1, "v")
    s1 = _samples(toy_weights, toy_store, toy_calib, lid1, (3, 4))
    async1 = E.build_estimator(toy_store, lid1, (3, 4), s1, mode="exact",
                               use_async=True)
    assert async1.input_source == E.PREVIOUS_RESIDUAL
    with pytest.raises(ValueError):
        E.build_estimator(toy_store, lid, (3, 4), s, mode="nope")


def test_hybrid_never_picks_dominated_linear(toy_weights, toy_store, toy_calib):
    # whichever kind wins must have the lower calibration-set relative error
    lid = M.LayerId(0, "q")
    s = _samples(toy_weights, toy_store, toy_calib, lid, (3, 4))
    est = E.build_estimator(toy_store, lid, (3, 4), s, mode="hybrid", k=8)
    ests = np.array([est.estimate(x) for x in s.inputs])
    got_mre = E.mean_relative_error(ests, s.errors)
    proj = E.build_projection(toy_store.layers[lid], 3, 4, 8, 0)
    proj, _, _ = E.calibrate_projection(proj, s.inputs, s.errors)
    proj_mre = E.mean_relative_error(
        [proj.estimate(x) for x in s.inputs], s.errors)
    assert got_mre <= proj_mre + 1e-12
