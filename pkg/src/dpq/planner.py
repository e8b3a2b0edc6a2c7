"""Plan construction: glue between the offline stages and the runtime.

The dynamic plan is built in three phases: (1) per-layer maximum precisions
under the memory budget, (2) fractional average precisions fitted toward the
target, (3) thresholds translated from the calibration error distribution,
plus one estimator per still-dynamic layer. Static baseline plans skip all
of that and encode a fixed assignment behind sentinel thresholds.
"""

from __future__ import annotations

import math

import numpy as np

from . import model as M
from . import quant as Q
from . import allocator as A
from . import estimator as E
from . import fitter as F
from .runtime import PlanLayer, PrecisionPlan, sentinel_static_plan


def solve_max_precisions(prof, store, weights, budget_bits) -> A.BitAssignment:
    """Phase 1: per-layer maximum precision B[i] minimizing the second-order
    sensitivity under the average-bit memory budget."""
    layers = M.layer_ids(weights.config)
    problem = A.BudgetProblem(layers, store.param_counts(),
                              list(range(store.b_min, store.n_bits + 1)),
                              prof.scores_second_order, budget_bits)
    return A.solve(problem)


def build_dp_plan(weights, store, prof, calib, budget_bits, target_bits,
                  estimator_mode="hybrid", use_async=False, k=E.DEFAULT_K,
                  seed=0, calibrate=True, hyper=None,
                  store_hash="", profile_hash=""):
    """Full dynamic-precision plan. Returns (plan, max_assignment, fit_log)."""
    hyper = hyper or F.FitConfig()
    assignment = solve_max_precisions(prof, store, weights, budget_bits)
    params, fit_log = F.fit(weights, store, assignment, calib, target_bits,
                            hyper)
    Mcounts = store.param_counts()

    pairs = {}
    for lid, p in params.p.items():
        c = F.InterpCoeffs.from_p(p)
        if c.l != c.h:
            pairs[lid] = (c.l, c.h)
    samples = {}
    if pairs:
        samples = E.collect_error_samples(weights, store, pairs,
                                          assignment.bits, calib)

    layers = {}
    for lid in M.layer_ids(weights.config):
        p = params.p[lid]
        c = F.InterpCoeffs.from_p(p)
        if c.l == c.h:
            # integral precision compiles to a static layer: no estimator,
            # no thresholding work at decode time
            layers[lid] = PlanLayer(lid, assignment.bits[lid], p,
                                    (c.l, c.l), np.inf, 1.0, None)
            continue
        entry = E.translate_threshold(samples[lid].sorted_errors, p, c.l)
        est = None
        if not math.isinf(entry.T):
            est = E.build_estimator(store, lid, (c.l, c.h), samples[lid],
                                    mode=estimator_mode, k=k, seed=seed,
                                    calibrate=calibrate, use_async=use_async)
        layers[lid] = PlanLayer(lid, assignment.bits[lid], p, (c.l, c.h),
                                entry.T, entry.r_quantile, est)

    plan = PrecisionPlan(
        "dp", target_bits, budget_bits, layers, Mcounts,
        store_hash=store_hash, profile_hash=profile_hash,
        estimator_mode=estimator_mode, use_async=use_async,
        fit_hyper={"epochs": hyper.epochs, "lr": hyper.lr,
                   "alpha": hyper.alpha, "batch_size": hyper.batch_size,
                   "seed": hyper.seed})
    return plan, assignment, fit_log


def build_static_baseline(weights, store, prof, method, target_bits,
                          store_hash="", profile_hash=""):
    """Static plan from a single score table (first-order or trace-based),
    encoded behind +inf thresholds so it runs on the dynamic path."""
    if method == "llm_mq":
        assignment = A.static_plan_llm_mq(prof, store, weights, target_bits)
    elif method == "hawq_v2":
        assignment = A.static_plan_hawq(prof, store, weights, target_bits)
    else:
        raise ValueError(f"unknown static method {method!r}")
    plan = sentinel_static_plan(assignment.bits, store.param_counts(),
                                target_bits, method=method)
    plan.store_hash = store_hash
    plan.profile_hash = profile_hash
    plan.warning = assignment.warning
    return plan, assignment


def plan_effective_bits(plan: PrecisionPlan) -> float:
    """Parameter-weighted average of the per-layer fractional precisions."""
    total = plan.total_params()
    return sum(pl.p * plan.M[lid] for lid, pl in plan.layers.items()) / total
