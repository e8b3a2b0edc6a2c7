"""Dynamic-precision decoding engine.

Executes a PrecisionPlan: prefill runs every layer at its per-layer maximum
precision, then each generated (or teacher-forced) token selects the high or
low bitwidth per layer by comparing the estimated output gap against the
layer's threshold. One code path serves dynamic plans and sentinel-forced
static plans alike, so baseline comparisons cannot drift apart.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import quant as Q
from . import estimator as E

PLAN_FORMAT = "dpq-plan-v1"


class ProvenanceError(Exception):
    pass


@dataclass
class PlanLayer:
    layer: M.LayerId
    prefill_bit: int            # per-layer maximum precision B[i]
    p: float
    pair: tuple                 # (l, h); l == h for compiled-static layers
    T: float                    # threshold, may be +/- inf
    r: float
    estimator: E.ErrorEstimator | None   # None when selection is forced

    @property
    def is_static(self) -> bool:
        return self.pair[0] == self.pair[1] or math.isinf(self.T)


@dataclass
class PrecisionPlan:
    method: str                 # dp | llm_mq | hawq_v2
    target_bits: float
    budget_bits: float
    layers: dict                # LayerId -> PlanLayer
    M: dict                     # LayerId -> parameter count
    store_hash: str = ""
    profile_hash: str = ""
    estimator_mode: str = "hybrid"
    use_async: bool = False
    fit_hyper: dict = field(default_factory=dict)
    warning: bool = False

    def total_params(self) -> int:
        return sum(self.M.values())


# ---------------------------------------------------------------------------
# Plan file (versioned JSON; arrays as base64 float64)
# ---------------------------------------------------------------------------

def _enc_arr(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode()}


def _dec_arr(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).copy()


def _enc_T(t: float):
    if t == np.inf:
        return "inf"
    if t == -np.inf:
        return "-inf"
    return t


def _dec_T(t):
    if t == "inf":
        return np.inf
    if t == "-inf":
        return -np.inf
    return float(t)


def _enc_estimator(est: E.ErrorEstimator | None):
    if est is None:
        return None
    k = est.kind
    if isinstance(k, E.LinearEstimator):
        kd = {"kind": "linear", "slope": k.slope, "intercept": k.intercept,
              "r2": k.r2}
    elif isinstance(k, E.ProjectionEstimator):
        kd = {"kind": "projection", "k": k.k, "seed": k.seed,
              "calibrated": k.calibrated, "G": _enc_arr(k.G)}
    elif isinstance(k, E.ExactEstimator):
        kd = {"kind": "exact"}
    else:
        raise TypeError(f"unknown estimator kind {type(k)}")
    return {"input_source": est.input_source, "pair": list(est.pair), **kd}


def _dec_estimator(d, lid, store):
    if d is None:
        return None
    pair = tuple(d["pair"])
    if d["kind"] == "linear":
        kind = E.LinearEstimator(d["slope"], d["intercept"], d["r2"])
    elif d["kind"] == "projection":
        kind = E.ProjectionEstimator(_dec_arr(d["G"]), d["k"], d["seed"],
                                     d["calibrated"])
    elif d["kind"] == "exact":
        if store is None:
            raise ValueError("loading an exact-estimator plan needs the store")
        kind = E.ExactEstimator(store.layers[lid], *pair)
    else:
        raise ValueError(f"unknown estimator kind {d['kind']}")
    return E.ErrorEstimator(kind, d["input_source"], pair)


def save_plan(plan: PrecisionPlan, path: str) -> None:
    layers = []
    for lid in sorted(plan.layers, key=lambda l: (l.block, M.KINDS.index(l.kind))):
        pl = plan.layers[lid]
        layers.append({
            "layer": lid.name, "prefill_bit": pl.prefill_bit, "p": pl.p,
            "l": pl.pair[0], "h": pl.pair[1], "T": _enc_T(pl.T), "r": pl.r,
            "estimator": _enc_estimator(pl.estimator),
        })
    doc = {
        "format": PLAN_FORMAT, "method": plan.method,
        "target_bits": plan.target_bits, "budget_bits": plan.budget_bits,
        "store_hash": plan.store_hash, "profile_hash": plan.profile_hash,
        "estimator_mode": plan.estimator_mode, "async": plan.use_async,
        "fit_hyper": plan.fit_hyper, "warning": plan.warning,
        "M": {lid.name: plan.M[lid] for lid in plan.M},
        "layers": layers,
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def load_plan(path: str, store: Q.BitPlaneStore | None = None) -> PrecisionPlan:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != PLAN_FORMAT:
        raise ValueError("not a dpq plan file")
    layers = {}
    for e in doc["layers"]:
        lid = M.LayerId.from_name(e["layer"])
        layers[lid] = PlanLayer(lid, e["prefill_bit"], e["p"],
                                (e["l"], e["h"]), _dec_T(e["T"]), e["r"],
                                _dec_estimator(e["estimator"], lid, store))
    return PrecisionPlan(
        doc["method"], doc["target_bits"], doc["budget_bits"], layers,
        {M.LayerId.from_name(n): c for n, c in doc["M"].items()},
        doc["store_hash"], doc["profile_hash"], doc["estimator_mode"],
        doc["async"], doc.get("fit_hyper", {}), doc.get("warning", False))


def sentinel_static_plan(assignment_bits: dict, M_counts: dict,
                         target_bits: float, method: str = "static") -> PrecisionPlan:
    """Encode a static bit assignment as +inf-threshold dynamic layers, so it
    runs on the exact same path as a dynamic plan."""
    layers = {}
    for lid, bit in assignment_bits.items():
        layers[lid] = PlanLayer(lid, bit, float(bit), (bit, bit),
                                np.inf, 1.0, None)
    return PrecisionPlan(method, target_bits, float("nan"), layers,
                         dict(M_counts))


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------

def select_precision(pl: PlanLayer, x) -> tuple:
    """Returns (bit, estimate, op_cost). Sentinel thresholds short-circuit."""
    l, h = pl.pair
    if pl.T == np.inf:
        return l, None, 0
    if pl.T == -np.inf:
        return h, None, 0
    est = pl.estimator.estimate(x)
    cost = pl.estimator.kind.op_cost(np.asarray(x).shape[-1])
    return (h if est > pl.T else l), est, cost


# ---------------------------------------------------------------------------
# Trace
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    bits: dict                  # LayerId -> selected bit
    estimates: dict             # LayerId -> estimate (None for forced)
    exact_errors: dict          # LayerId -> exact gap (when tracked)
    effective_bits: float


@dataclass
class DecodeTrace:
    steps: list = field(default_factory=list)
    estimator_ops: int = 0
    token_losses: list = field(default_factory=list)

    def mean_effective_bits(self) -> float:
        if not self.steps:
            raise ValueError("empty trace")
        return float(np.mean([s.effective_bits for s in self.steps]))

    def high_rate(self, lid, h) -> float:
        """Fraction of steps this layer was served at bit h."""
        return float(np.mean([s.bits[lid] == h for s in self.steps]))

    def export_csv(self, path: str) -> None:
        with open(path, "w") as f:
            f.write("step,layer,bit,estimate\n")
            for s in self.steps:
                for lid, bit in s.bits.items():
                    est = s.estimates.get(lid)
                    f.write(f"{s.step},{lid.name},{bit},"
                            f"{'' if est is None else repr(est)}\n")

    def summary(self) -> dict:
        return {
            "n_steps": len(self.steps),
            "mean_effective_bits": self.mean_effective_bits() if self.steps else None,
            "estimator_ops": self.estimator_ops,
        }


# ---------------------------------------------------------------------------
# Stepwise engine (KV cache, one token per step)
# ---------------------------------------------------------------------------

class DecodeEngine:
    """Sequential decode session over an immutable plan + store.

    async_rule 'prev_step' feeds a previous-residual estimator the layer's own
    input from the previous decode step; 'prev_block' uses the same-kind
    layer's input one block earlier at the current step.
    """

    def __init__(self, weights: M.ModelWeights, store: Q.BitPlaneStore,
                 plan: PrecisionPlan, store_hash: str | None = None,
                 track_exact: bool = False, async_rule: str = "prev_step",
                 prime_from_prefill: bool = True):
        if store_hash is not None and plan.store_hash and store_hash != plan.store_hash:
            raise ProvenanceError(
                f"plan was built against store {plan.store_hash[:12]}, "
                f"got {store_hash[:12]}")
        if store.config_hash != weights.config.hash():
            raise ProvenanceError("store/model config mismatch")
        if async_rule not in ("prev_step", "prev_block"):
            raise ValueError(f"unknown async rule {async_rule!r}")
        self.weights = weights
        self.store = store
        self.plan = plan
        self.cfg = weights.config
        self.track_exact = track_exact
        self.async_rule = async_rule
        self.prime_from_prefill = prime_from_prefill
        self.total_params = plan.total_params()
        self._embed = weights.embed.astype(np.float64)
        self._lm = weights.lm_head.astype(np.float64)
        cos, sin = M._rope_tables(self.cfg.seq_cap, self.cfg.head_dim)
        self._cos, self._sin = cos, sin
        self.reset()

    def reset(self):
        self._kv = [([], []) for _ in range(self.cfg.n_blocks)]
        self._pos = 0
        self._prev_inputs = {}      # LayerId -> input vector at previous step
        self._cur_inputs = {}
        self.trace = DecodeTrace()

    # -- helpers --------------------------------------------------------

    def _rope_vec(self, v, t):
        # v: (H, hd) at absolute position t
        if self._cos is None:
            return v
        half = self._cos.shape[1]
        c, s = self._cos[t], self._sin[t]
        out = v.copy()
        v1, v2 = v[:, :half], v[:, half:2 * half]
        out[:, :half] = v1 * c - v2 * s
        out[:, half:2 * half] = v1 * s + v2 * c
        return out

    def _estimator_input(self, lid, x):
        pl = self.plan.layers[lid]
        est = pl.estimator
        if est is None or est.input_source == E.IMMEDIATE:
            return x
        if self.async_rule == "prev_block":
            prev = self._cur_inputs.get(M.LayerId(lid.block - 1, lid.kind))
        else:
            prev = self._prev_inputs.get(lid)
        return prev if prev is not None else x

    def _layer_matrix(self, lid, x, record):
        pl = self.plan.layers[lid]
        if record is None:
            bit = pl.prefill_bit
            est_val = None
        else:
            xin = self._estimator_input(lid, x)
            bit, est_val, cost = select_precision(pl, xin)
            self.trace.estimator_ops += cost
            record.bits[lid] = bit
            record.estimates[lid] = est_val
            if self.track_exact and pl.pair[0] != pl.pair[1]:
                record.exact_errors[lid] = E.exact_error(
                    self.store.layers[lid], pl.pair[0], pl.pair[1], x)
        self._cur_inputs[lid] = x
        return Q.dequantize(self.store.layers[lid], bit)

    # -- core step ------------------------------------------------------

    def step(self, token: int, dynamic: bool = True):
        """Process one token; returns the logits vector for the next token.

        dynamic=False runs every layer at its prefill (maximum) precision
        and records nothing in the trace.
        """
        t = self._pos
        if t >= self.cfg.seq_cap:
            raise ValueError("sequence cap exceeded")
        cfg = self.cfg
        H, hd, d = cfg.n_heads, cfg.head_dim, cfg.d_model
        scale = 1.0 / np.sqrt(hd)
        record = StepRecord(t, {}, {}, {}, 0.0) if dynamic else None
        self._cur_inputs = {}

        x = self._embed[token].copy()
        for b in range(cfg.n_blocks):
            n1 = self._norm(x)
            q = (self._layer_matrix(M.LayerId(b, "q"), n1, record) @ n1).reshape(H, hd)
            k = (self._layer_matrix(M.LayerId(b, "k"), n1, record) @ n1).reshape(H, hd)
            v = (self._layer_matrix(M.LayerId(b, "v"), n1, record) @ n1).reshape(H, hd)
            q = self._rope_vec(q, t)
            k = self._rope_vec(k, t)
            ks, vs = self._kv[b]
            ks.append(k)
            vs.append(v)
            K = np.stack(ks)                    # (t+1, H, hd)
            V = np.stack(vs)
            scores = np.einsum("hd,shd->hs", q, K) * scale
            scores -= scores.max(axis=1, keepdims=True)
            e = np.exp(scores)
            probs = e / e.sum(axis=1, keepdims=True)
            attn = np.einsum("hs,shd->hd", probs, V).reshape(d)
            o = self._layer_matrix(M.LayerId(b, "o"), attn, record) @ attn
            x = x + o
            n2 = self._norm(x)
            up = self._layer_matrix(M.LayerId(b, "up"), n2, record) @ n2
            gate = self._layer_matrix(M.LayerId(b, "gate"), n2, record) @ n2
            h = up * (gate / (1.0 + np.exp(-gate)))
            down = self._layer_matrix(M.LayerId(b, "down"), h, record) @ h
            x = x + down

        logits = self._lm @ self._norm(x)
        self._pos += 1
        if record is not None:
            eff = sum(record.bits[lid] * self.plan.M[lid]
                      for lid in record.bits) / self.total_params
            record.effective_bits = eff
            self.trace.steps.append(record)
        if dynamic or self.prime_from_prefill:
            self._prev_inputs = self._cur_inputs
        return logits

    def _norm(self, x):
        return x / np.sqrt(np.mean(x * x) + self.cfg.norm_eps)

    def prefill(self, tokens):
        logits = None
        for tok in tokens:
            logits = self.step(int(tok), dynamic=False)
        return logits


def decode(weights, store, plan, prompt, n_new, store_hash=None,
           track_exact=False, **engine_kw):
    """Greedy decode: prefill at maximum precision, then n_new dynamic steps.

    Returns (generated tokens, DecodeTrace).
    """
    if len(prompt) == 0:
        raise ValueError("empty prompt")
    eng = DecodeEngine(weights, store, plan, store_hash,
                       track_exact=track_exact, **engine_kw)
    logits = eng.prefill(prompt)
    out = []
    for _ in range(n_new):
        nxt = int(np.argmax(logits))
        out.append(nxt)
        logits = eng.step(nxt, dynamic=True)
    return out, eng.trace


def eval_perplexity(weights, store, tokens, mode, plan=None, assignment=None,
                    store_hash=None, track_exact=False, **engine_kw):
    """Teacher-forced perplexity through the decode machinery.

    mode 'fp': full-precision forward (identical to the model harness loss).
    mode 'static': BitAssignment encoded as a sentinel plan.
    mode 'dynamic': the given PrecisionPlan; first token is prefill.
    Returns (perplexity, DecodeTrace).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) < 2:
        raise ValueError("need at least 2 tokens")
    if mode == "fp":
        loss, ppl, per_token = M.teacher_forced_loss(weights, tokens)
        tr = DecodeTrace(token_losses=list(map(float, per_token)))
        return ppl, tr
    if mode == "static":
        if assignment is None:
            raise ValueError("static mode needs a bit assignment")
        plan = sentinel_static_plan(assignment.bits, store.param_counts(),
                                    float("nan"))
    elif mode != "dynamic":
        raise ValueError(f"unknown mode {mode!r}")
    if plan is None:
        raise ValueError("dynamic mode needs a plan")
    eng = DecodeEngine(weights, store, plan, store_hash,
                       track_exact=track_exact, **engine_kw)
    logits = eng.step(int(tokens[0]), dynamic=False)    # prefill
    losses = []
    for i in range(1, len(tokens)):
        z = logits - logits.max()
        losses.append(float(np.log(np.exp(z).sum()) - z[tokens[i]]))
        if i < len(tokens) - 1:
            logits = eng.step(int(tokens[i]), dynamic=True)
    eng.trace.token_losses = losses
    ppl = float(np.exp(np.mean(losses)))
    return ppl, eng.trace


def incurred_error_comparison(trace: DecodeTrace, plan: PrecisionPlan) -> dict:
    """Per dynamic layer: incurred exact error (sum over steps served at the
    low bit) of the threshold policy versus a fixed schedule that serves the
    high bit the same number of times at evenly spaced steps.

    Needs a trace collected with track_exact=True. Returns
    LayerId -> (dynamic_incurred, matched_static_incurred, m_high, n_steps).
    """
    out = {}
    if not trace.steps:
        return out
    for lid in trace.steps[0].exact_errors:
        l, h = plan.layers[lid].pair
        errs = np.array([s.exact_errors[lid] for s in trace.steps])
        bits = np.array([s.bits[lid] for s in trace.steps])
        n = len(errs)
        m = int(np.sum(bits == h))
        dyn = float(errs[bits == l].sum())
        idx = (np.arange(m) * n) // m if m else np.array([], dtype=int)
        matched = float(errs.sum() - errs[idx].sum())
        out[lid] = (dyn, matched, m, n)
    return out


# ---------------------------------------------------------------------------
# QoS statistics
# ---------------------------------------------------------------------------

def qos_stats(traces, target_bits: float) -> dict:
    """Per-query mean effective bits and 90th/99th percentile increase
    relative to the mean, nearest-rank percentiles."""
    if not traces:
        raise ValueError("empty query set")
    means = np.array([t.mean_effective_bits() for t in traces])
    mean = float(means.mean())
    s = np.sort(means)

    def pct(q):
        idx = min(max(math.ceil(q * len(s)) - 1, 0), len(s) - 1)
        return float(s[idx])

    p90, p99 = pct(0.90), pct(0.99)
    return {
        "target": target_bits,
        "mean": mean,
        "p90": p90,
        "p99": p99,
        "p90_delta_pct": 100.0 * (p90 - mean) / mean,
        "p99_delta_pct": 100.0 * (p99 - mean) / mean,
        "n_queries": len(traces),
    }
