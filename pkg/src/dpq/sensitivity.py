"""Per-layer, per-bitwidth static sensitivity scores.

Fisher-diagonal accumulation (squared gradients over the calibration set)
feeds the second-order loss-perturbation score and the trace-based score;
the accumulated raw gradient feeds the first-order score. Accumulation uses
pairwise (tree) summation so the result is order-insensitive to ~1e-12.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import model as M
from . import quant as Q

PROFILE_MAGIC = b"DPQP1\n"

# The trace of the Fisher block is averaged per parameter (not per row).
HAWQ_TRACE_MODE = "per-parameter-mean"


class _PairwiseAccumulator:
    """Streaming binary-counter pairwise summation of dict-of-array samples."""

    def __init__(self):
        self._stack = []    # list of (level, dict)

    def add(self, sample: dict):
        level = 0
        while self._stack and self._stack[-1][0] == level:
            _, prev = self._stack.pop()
            sample = {k: prev[k] + sample[k] for k in sample}
            level += 1
        self._stack.append((level, sample))

    def total(self) -> dict:
        if not self._stack:
            raise ValueError("no samples accumulated")
        acc = None
        for _, part in reversed(self._stack):
            acc = part if acc is None else {k: acc[k] + part[k] for k in part}
        return acc


@dataclass
class SensitivityProfile:
    fisher_diag: dict           # LayerId -> (out, in), sum of squared grads
    grad_sum: dict              # LayerId -> (out, in), sum of grads
    scores_second_order: dict   # (LayerId, b) -> float
    scores_first_order: dict
    scores_hawq: dict
    n_samples: int
    corpus_hash: str = ""
    store_hash: str = ""


def profile(weights: M.ModelWeights, store: Q.BitPlaneStore, calib,
            corpus_hash: str = "", store_hash: str = "") -> SensitivityProfile:
    """Accumulate Fisher diagonal and gradient sums over calibration samples,
    then cache all three score tables for every (layer, b)."""
    samples = list(calib)
    if not samples:
        raise ValueError("empty calibration set")
    fisher_acc, grad_acc = _PairwiseAccumulator(), _PairwiseAccumulator()
    for tokens in samples:
        _, bundle, _ = M.backward(weights, tokens)
        fisher_acc.add({lid: g * g for lid, g in bundle.weight_grads.items()})
        grad_acc.add(dict(bundle.weight_grads))
    prof = SensitivityProfile(fisher_acc.total(), grad_acc.total(),
                              {}, {}, {}, len(samples), corpus_hash, store_hash)
    for lid in M.layer_ids(weights.config):
        for b in range(store.b_min, store.n_bits + 1):
            prof.scores_second_order[(lid, b)] = second_order_score(
                prof, store, weights, lid, b)
            prof.scores_first_order[(lid, b)] = first_order_score(
                prof, store, weights, lid, b)
            prof.scores_hawq[(lid, b)] = hawq_score(prof, store, weights, lid, b)
    return prof


def second_order_score(prof, store, weights, lid, b) -> float:
    """0.5 * sum_k F_kk * ((W - W_b)_k)^2."""
    W = weights.linears[lid].astype(np.float64)
    Wb = Q.dequantize(store.layers[lid], b)
    diff = W - Wb
    return float(0.5 * np.sum(prof.fisher_diag[lid] * diff * diff))


def first_order_score(prof, store, weights, lid, b) -> float:
    """|<sum of gradients, W - W_b>| (first-order loss perturbation)."""
    W = weights.linears[lid].astype(np.float64)
    Wb = Q.dequantize(store.layers[lid], b)
    return float(abs(np.sum(prof.grad_sum[lid] * (W - Wb))))


def hawq_score(prof, store, weights, lid, b) -> float:
    """mean(Fisher diagonal of the layer) * ||W - W_b||_2^2."""
    W = weights.linears[lid].astype(np.float64)
    Wb = Q.dequantize(store.layers[lid], b)
    return float(np.mean(prof.fisher_diag[lid]) * np.sum((W - Wb) ** 2))


# ---------------------------------------------------------------------------
# Profile file: text magic + JSON header line (score tables, metadata, array
# manifest) followed by raw little-endian float64 arrays.
# ---------------------------------------------------------------------------

def _scores_to_json(table):
    return {f"{lid.name}:{b}": v for (lid, b), v in table.items()}


def _scores_from_json(d):
    out = {}
    for key, v in d.items():
        name, b = key.rsplit(":", 1)
        out[(M.LayerId.from_name(name), int(b))] = v
    return out


def save_profile(prof: SensitivityProfile, path: str) -> None:
    order = sorted(prof.fisher_diag, key=lambda l: (l.block, M.KINDS.index(l.kind)))
    arrays = []
    for lid in order:
        arrays.append((f"fisher/{lid.name}", prof.fisher_diag[lid]))
        arrays.append((f"grad/{lid.name}", prof.grad_sum[lid]))
    header = {
        "n_samples": prof.n_samples,
        "corpus_hash": prof.corpus_hash,
        "store_hash": prof.store_hash,
        "hawq_trace_mode": HAWQ_TRACE_MODE,
        "scores_second_order": _scores_to_json(prof.scores_second_order),
        "scores_first_order": _scores_to_json(prof.scores_first_order),
        "scores_hawq": _scores_to_json(prof.scores_hawq),
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    with open(path, "wb") as f:
        f.write(PROFILE_MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode())
        f.write(b"\n")
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_profile(path: str) -> SensitivityProfile:
    with open(path, "rb") as f:
        if f.read(len(PROFILE_MAGIC)) != PROFILE_MAGIC:
            raise ValueError("not a dpq profile file")
        header = json.loads(f.readline().decode())
        fisher, grad = {}, {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape))
            arr = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape).copy()
            group, name = entry["name"].split("/", 1)
            (fisher if group == "fisher" else grad)[M.LayerId.from_name(name)] = arr
    return SensitivityProfile(
        fisher, grad,
        _scores_from_json(header["scores_second_order"]),
        _scores_from_json(header["scores_first_order"]),
        _scores_from_json(header["scores_hawq"]),
        header["n_samples"], header["corpus_hash"],
        header.get("store_hash", ""))
