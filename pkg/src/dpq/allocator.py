"""Exact per-layer bit selection under an average-bit memory budget.

Dynamic program over layers with the budget tracked in integer parameter-bit
units (sum of b * M_i), so the optimum is exact and directly comparable to
brute-force enumeration. Also hosts the static baseline planners: the
first-order-score plan with its lower-bound sweep, and the trace-based plan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

EPS_ACCT = 1e-9     # relative tolerance for floating-point budget comparisons
SWEEP_STEP = 0.01
SWEEP_WINDOW = 0.005


class InfeasibleError(Exception):
    pass


@dataclass
class BudgetProblem:
    layers: list                    # ordered LayerIds
    M: dict                         # LayerId -> parameter count
    B_set: list                     # available bits, ascending
    scores: dict                    # (LayerId, b) -> float
    budget_bits: float
    lower_bound_bits: float | None = None

    def __post_init__(self):
        self.B_set = sorted(self.B_set)
        if any(self.M[l] <= 0 for l in self.layers):
            raise ValueError("parameter counts must be positive")


@dataclass
class BitAssignment:
    bits: dict                      # LayerId -> chosen bit
    achieved_avg: float
    objective: float
    warning: bool = False

    def recompute_avg(self, M: dict) -> float:
        total = sum(M[l] for l in self.bits)
        return sum(self.bits[l] * M[l] for l in self.bits) / total


def solve(problem: BudgetProblem) -> BitAssignment:
    """Exact optimum of sum of scores s.t. the parameter-bit budget window.

    Ties are broken toward the lower bit, scanning layers in order, i.e. the
    lexicographically smallest bit vector among the optima is returned.
    """
    layers, B_set, M = problem.layers, problem.B_set, problem.M
    total_params = sum(M[l] for l in layers)
    budget_units = problem.budget_bits * total_params
    w_max = math.floor(budget_units * (1 + EPS_ACCT) + 1e-12)
    if problem.lower_bound_bits is not None:
        lb_units = problem.lower_bound_bits * total_params
        w_min = math.ceil(lb_units * (1 - EPS_ACCT) - 1e-12)
    else:
        w_min = 0

    min_total = sum(min(B_set) * M[l] for l in layers)
    max_total = sum(max(B_set) * M[l] for l in layers)
    if min_total > w_max:
        raise InfeasibleError(
            f"all-minimum assignment uses {min_total} parameter-bits, "
            f"budget allows {w_max}")
    if max_total < w_min:
        raise InfeasibleError(
            f"lower bound requires {w_min} parameter-bits, "
            f"maximum achievable is {max_total}")

    cap = min(w_max, max_total)
    inf = np.inf
    n = len(layers)
    # suffix DP: dp[c] = min cost of layers i..n-1 using exactly c units
    dp = np.full(cap + 1, inf)
    dp[0] = 0.0
    suffix = [None] * (n + 1)
    suffix[n] = dp
    for i in range(n - 1, -1, -1):
        ndp = np.full(cap + 1, inf)
        prev = suffix[i + 1]
        for b in B_set:
            w = b * M[layers[i]]
            if w > cap:
                continue
            cand = problem.scores[(layers[i], b)] + prev[: cap + 1 - w]
            np.minimum(ndp[w:], cand, out=ndp[w:])
        suffix[i] = ndp
    root = suffix[0]
    lo = max(w_min, 0)
    if lo > cap or not np.isfinite(root[lo: cap + 1]).any():
        raise InfeasibleError("no assignment satisfies the budget window")
    r_opt = root[lo: cap + 1].min()

    # reconstruct: lowest bit first per layer, exact float equality against dp
    bits = {}
    used = 0
    for i, lid in enumerate(layers):
        nxt = suffix[i + 1]
        chosen = None
        for b in B_set:
            w = b * M[lid]
            win_lo = max(w_min - used - w, 0)
            win_hi = cap - used - w
            if win_hi < win_lo:
                continue
            window = nxt[win_lo: win_hi + 1]
            m = window.min() if len(window) else inf
            if np.isfinite(m) and problem.scores[(lid, b)] + m == r_opt:
                chosen = b
                r_opt = m
                break
        assert chosen is not None, "reconstruction failed"
        bits[lid] = chosen
        used += chosen * M[lid]

    achieved = used / total_params
    objective = math.fsum(problem.scores[(l, bits[l])] for l in layers)
    return BitAssignment(bits, achieved, objective)


def _static_plan(layers, M, B_set, scores, target_bits) -> BitAssignment:
    """Solve with a lower bound swept upward from 0 in 0.01 steps until the
    achieved average lands within 0.005 bits of the target."""
    best = None
    lb = 0.0
    while lb <= target_bits + SWEEP_STEP / 2:
        problem = BudgetProblem(layers, M, B_set, scores, target_bits,
                                lower_bound_bits=lb if lb > 0 else None)
        try:
            best = solve(problem)
        except InfeasibleError:
            break
        if abs(best.achieved_avg - target_bits) <= SWEEP_WINDOW:
            return best
        lb = round(lb + SWEEP_STEP, 10)
    if best is None:
        raise InfeasibleError("no feasible static assignment")
    best.warning = True
    return best


def static_plan_llm_mq(prof, store, weights, target_bits) -> BitAssignment:
    from .model import layer_ids
    layers = layer_ids(weights.config)
    M = store.param_counts()
    B_set = list(range(store.b_min, store.n_bits + 1))
    return _static_plan(layers, M, B_set, prof.scores_first_order, target_bits)


def static_plan_hawq(prof, store, weights, target_bits) -> BitAssignment:
    from .model import layer_ids
    layers = layer_ids(weights.config)
    M = store.param_counts()
    B_set = list(range(store.b_min, store.n_bits + 1))
    return _static_plan(layers, M, B_set, prof.scores_hawq, target_bits)
