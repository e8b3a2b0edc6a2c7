import numpy as np
import pytest

from dpq import fitter as F
from dpq import model as M
from dpq import quant as Q
from dpq.allocator import BitAssignment, InfeasibleError


def _uniform_assignment(store, bit):
    return BitAssignment({lid: bit for lid in store.layers}, float(bit), 0.0)


def test_interp_coeffs():
    c = F.InterpCoeffs.from_p(3.75)
    assert (c.l, c.h) == (3, 4)
    assert np.isclose(c.r, 0.25)
    c = F.InterpCoeffs.from_p(4.0)
    assert (c.l, c.h) == (4, 4)
    assert c.r == 1.0


def test_interp_forward_mixes(toy_store):
    lid = M.LayerId(0, "q")
    layer = toy_store.layers[lid]
    x = np.random.default_rng(0).normal(size=32)
    c = F.InterpCoeffs.from_p(3.6)
    y = F.interp_forward(layer, c, x)
    expect = c.r * Q.gemv(layer, 3, x) + (1 - c.r) * Q.gemv(layer, 4, x)
    assert np.allclose(y, expect)
    # integral p falls back to a single product
    c4 = F.InterpCoeffs.from_p(4.0)
    assert np.allclose(F.interp_forward(layer, c4, x), Q.gemv(layer, 4, x))


def test_avg_precision_weighting(toy_store):
    Mc = toy_store.param_counts()
    lids = list(Mc)
    params = F.PrecisionParams({l: 4.0 for l in lids},
                               {l: (3, 6) for l in lids}, 4.0, 1.0)
    assert np.isclose(params.avg_precision(Mc), 4.0)
    params.p[lids[0]] = 6.0
    assert params.avg_precision(Mc) > 4.0


def test_grad_p_matches_finite_differences(toy_weights, toy_store, toy_calib):
    toks = toy_calib[0]
    lids = M.layer_ids(toy_weights.config)
    p0 = {lid: 4.5 for lid in lids}
    eps = 1e-4
    coeffs = {lid: F.InterpCoeffs.from_p(p0[lid]) for lid in lids}
    provider = F._interp_provider(toy_store, coeffs)
    loss, bundle, tape = M.backward(toy_weights, toks, provider)
    inputs = M.layer_inputs(tape)
    for lid in lids[:5]:
        g = F.grad_p(toy_store.layers[lid], coeffs[lid],
                     bundle.output_grads[lid], inputs[lid])

        def loss_at(pv):
            cs = dict(coeffs)
            cs[lid] = F.InterpCoeffs.from_p(pv)
            lv, _, _ = M.teacher_forced_loss(toy_weights, toks,
                                             F._interp_provider(toy_store, cs))
            return lv

        fd = (loss_at(p0[lid] + eps) - loss_at(p0[lid] - eps)) / (2 * eps)
        assert abs(g - fd) <= 1e-3 * max(1.0, abs(fd))


def test_regularized_loss():
    lids = [M.LayerId(0, "q")]
    params = F.PrecisionParams({lids[0]: 4.5}, {lids[0]: (3, 6)}, 4.0, 2.0)
    assert np.isclose(F.regularized_loss(1.0, params, {lids[0]: 10}),
                      1.0 + 2.0 * 0.25)


def test_fit_reaches_target(toy_weights, toy_store, toy_calib):
    assignment = _uniform_assignment(toy_store, 5)
    params, log = F.fit(toy_weights, toy_store, assignment, toy_calib, 4.0,
                        F.FitConfig(epochs=3))
    avg = params.avg_precision(toy_store.param_counts())
    assert abs(avg - 4.0) <= 0.05
    assert len(log) == 3
    for lid, p in params.p.items():
        lo, hi = 3, assignment.bits[lid]
        assert lo <= p <= hi


def test_fit_infeasible_target(toy_weights, toy_store, toy_calib):
    assignment = _uniform_assignment(toy_store, 4)
    with pytest.raises(InfeasibleError):
        F.fit(toy_weights, toy_store, assignment, toy_calib, 4.5)
    with pytest.raises(InfeasibleError):
        F.fit(toy_weights, toy_store, assignment, toy_calib, 2.0)


def test_fit_deterministic(toy_weights, toy_store, toy_calib):
    assignment = _uniform_assignment(toy_store, 5)
    cfg = F.FitConfig(epochs=1, seed=11)
    a, _ = F.fit(toy_weights, toy_store, assignment, toy_calib, 4.0, cfg)
    b, _ = F.fit(toy_weights, toy_store, assignment, toy_calib, 4.0, cfg)
    assert a.p == b.p


def test_fit_log_csv(tmp_path):
    path = str(tmp_path / "fit.csv")
    F.write_fit_log([(0, 1.5, 0.01, 4.2)], path)
    lines = open(path).read().splitlines()
    assert lines[0] == "epoch,loss,regularizer,avg_precision"
    assert lines[1].startswith("0,1.5,0.01,4.2")
