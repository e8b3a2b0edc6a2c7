"""Desk-scale decoder-only transformer with manual reverse-mode gradients.

Pre-norm blocks: RMSNorm -> attention (q/k/v/o, RoPE, causal) -> residual,
RMSNorm -> gated MLP (up/gate/down, SiLU) -> residual. Byte-level vocab.
Weights are stored in float32; all computation runs in float64 so the
finite-difference tests downstream have headroom.
"""

from __future__ import annotations

import json
import hashlib
from dataclasses import dataclass, field

import numpy as np

KINDS = ("q", "k", "v", "o", "up", "gate", "down")
RESIDUAL_FED_KINDS = frozenset({"q", "k", "v", "up"})
ROPE_BASE = 10000.0


@dataclass(frozen=True)
class LayerId:
    block: int
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def name(self) -> str:
        return f"block{self.block}.{self.kind}"

    @property
    def residual_fed(self) -> bool:
        return self.kind in RESIDUAL_FED_KINDS

    @staticmethod
    def from_name(name: str) -> "LayerId":
        block_part, kind = name.split(".")
        return LayerId(int(block_part.removeprefix("block")), kind)


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab: int = 256
    seq_cap: int = 1024
    norm_eps: float = 1e-6

    def __post_init__(self):
        for f in ("n_blocks", "d_model", "n_heads", "d_ff", "vocab", "seq_cap"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.norm_eps <= 0:
            raise ValueError("norm_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_blocks": self.n_blocks, "d_model": self.d_model,
            "n_heads": self.n_heads, "d_ff": self.d_ff, "vocab": self.vocab,
            "seq_cap": self.seq_cap, "norm_eps": self.norm_eps,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def layer_ids(config: ModelConfig) -> list[LayerId]:
    """Canonical layer order: per block, kinds in q,k,v,o,up,gate,down order."""
    return [LayerId(b, k) for b in range(config.n_blocks) for k in KINDS]


def layer_shape(config: ModelConfig, lid: LayerId) -> tuple[int, int]:
    d, f = config.d_model, config.d_ff
    return {
        "q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d),
        "up": (f, d), "gate": (f, d), "down": (d, f),
    }[lid.kind]


@dataclass
class ModelWeights:
    config: ModelConfig
    embed: np.ndarray       # (vocab, d)
    lm_head: np.ndarray     # (vocab, d); logits = x @ lm_head.T
    linears: dict           # LayerId -> float32 matrix, (out, in)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.embed.tobytes())
        h.update(self.lm_head.tobytes())
        for lid in layer_ids(self.config):
            h.update(self.linears[lid].tobytes())
        return h.hexdigest()


def init_model(seed: int, config: ModelConfig) -> ModelWeights:
    """Deterministic random init. Same (seed, config) -> bit-identical weights.

    The unembedding is scaled down so a fresh model predicts near-uniformly
    over the byte vocabulary.
    """
    rng = np.random.default_rng(seed)
    embed = rng.normal(0.0, 1.0, (config.vocab, config.d_model)).astype(np.float32)
    lm_head = (rng.normal(0.0, 1.0, (config.vocab, config.d_model))
               * (0.1 / np.sqrt(config.d_model))).astype(np.float32)
    linears = {}
    for lid in layer_ids(config):
        rows, cols = layer_shape(config, lid)
        w = rng.normal(0.0, 1.0 / np.sqrt(cols), (rows, cols))
        linears[lid] = w.astype(np.float32)
    return ModelWeights(config, embed, lm_head, linears)


# ---------------------------------------------------------------------------
# Weight manifest I/O: JSON manifest + one little-endian flat binary file.
# ---------------------------------------------------------------------------

class WeightFormatError(Exception):
    pass


def export_weights(weights: ModelWeights, manifest_path: str) -> None:
    bin_path = str(manifest_path) + ".bin"
    tensors = [("embed", weights.embed), ("lm_head", weights.lm_head)]
    tensors += [(lid.name, weights.linears[lid]) for lid in layer_ids(weights.config)]
    entries = []
    offset = 0
    with open(bin_path, "wb") as f:
        for name, arr in tensors:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            f.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape),
                            "dtype": "float32", "offset": offset,
                            "nbytes": arr.nbytes})
            offset += arr.nbytes
    manifest = {"format": "dpq-weights-v1", "config": weights.config.to_dict(),
                "data_file": bin_path.rsplit("/", 1)[-1], "tensors": entries}
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=1)


def load_weights(manifest_path: str) -> ModelWeights:
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("format") != "dpq-weights-v1":
        raise WeightFormatError("not a dpq weight manifest")
    config = ModelConfig.from_dict(manifest["config"])
    bin_path = str(manifest_path).rsplit("/", 1)
    bin_path = ("/".join(bin_path[:-1] + [manifest["data_file"]])
                if len(bin_path) > 1 else manifest["data_file"])
    with open(bin_path, "rb") as f:
        raw = f.read()

    by_name = {}
    for e in manifest["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(raw):
            raise IOError(f"weight file truncated: tensor {e['name']} "
                          f"needs bytes up to {end}, file has {len(raw)}")
        arr = np.frombuffer(raw[e["offset"]:end], dtype="<f4").reshape(e["shape"])
        by_name[e["name"]] = arr.copy()

    def expect(name, shape):
        if name not in by_name:
            raise WeightFormatError(f"missing tensor entry: {name}")
        if tuple(by_name[name].shape) != tuple(shape):
            raise WeightFormatError(
                f"shape mismatch for tensor {name}: manifest {by_name[name].shape}, "
                f"config requires {tuple(shape)}")
        return by_name[name]

    embed = expect("embed", (config.vocab, config.d_model))
    lm_head = expect("lm_head", (config.vocab, config.d_model))
    linears = {lid: expect(lid.name, layer_shape(config, lid))
               for lid in layer_ids(config)}
    return ModelWeights(config, embed, lm_head, linears)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def full_precision_provider(weights: ModelWeights):
    def provider(lid: LayerId) -> np.ndarray:
        return weights.linears[lid]
    return provider


def _rope_tables(n_pos: int, head_dim: int):
    half = head_dim // 2
    if half == 0:
        return None, None
    inv_freq = ROPE_BASE ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = np.arange(n_pos, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)   # each (n_pos, half)


def _rope_apply(x, cos, sin):
    # x: (T, H, hd); rotate the first 2*half dims (half-split convention)
    if cos is None:
        return x
    half = cos.shape[1]
    x1, x2 = x[..., :half], x[..., half:2 * half]
    out = x.copy()
    c, s = cos[:, None, :], sin[:, None, :]
    out[..., :half] = x1 * c - x2 * s
    out[..., half:2 * half] = x1 * s + x2 * c
    return out


def _rope_unapply_grad(g, cos, sin):
    # gradient through the rotation: apply the inverse rotation
    if cos is None:
        return g
    half = cos.shape[1]
    g1, g2 = g[..., :half], g[..., half:2 * half]
    out = g.copy()
    c, s = cos[:, None, :], sin[:, None, :]
    out[..., :half] = g1 * c + g2 * s
    out[..., half:2 * half] = -g1 * s + g2 * c
    return out


def _rmsnorm(x, eps):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * inv, inv


def _rmsnorm_backward(dy, x, inv, d):
    dot = np.sum(dy * x, axis=-1, keepdims=True)
    return dy * inv - x * (inv ** 3) * dot / d


def _silu(z):
    sig = 1.0 / (1.0 + np.exp(-z))
    return z * sig, sig


@dataclass
class BlockTape:
    x_in: np.ndarray        # residual stream entering the block (T, d)
    n1: np.ndarray
    inv1: np.ndarray
    q_rot: np.ndarray       # (T, H, hd) after RoPE
    k_rot: np.ndarray
    v: np.ndarray           # (T, H, hd)
    probs: np.ndarray       # (H, T, T)
    attn_cat: np.ndarray    # (T, d), input to the o projection
    x_mid: np.ndarray
    n2: np.ndarray
    inv2: np.ndarray
    up: np.ndarray          # (T, d_ff)
    gate: np.ndarray
    sig: np.ndarray
    h: np.ndarray           # up * silu(gate), input to down


@dataclass
class ForwardTape:
    tokens: np.ndarray
    blocks: list
    x_final: np.ndarray
    inv_f: np.ndarray
    normed_f: np.ndarray
    logits: np.ndarray
    provider_mats: dict     # LayerId -> float64 matrix actually used


def forward(weights: ModelWeights, tokens, provider=None,
            want_tape: bool = False):
    """Causal forward pass. Returns logits (T, vocab), and a tape if requested.

    ``provider(layer_id) -> matrix`` supplies the weights for the seven linear
    kinds; the forward output is a pure function of what it returns.
    """
    cfg = weights.config
    tokens = np.asarray(tokens, dtype=np.int64)
    T = len(tokens)
    if T > cfg.seq_cap:
        raise ValueError(f"sequence length {T} exceeds seq_cap {cfg.seq_cap}")
    if provider is None:
        provider = full_precision_provider(weights)
    H, hd = cfg.n_heads, cfg.head_dim
    cos, sin = _rope_tables(T, hd)
    scale = 1.0 / np.sqrt(hd)

    mats = {}

    def W(lid):
        m = np.asarray(provider(lid), dtype=np.float64)
        mats[lid] = m
        return m

    x = weights.embed[tokens].astype(np.float64)
    blocks = []
    for b in range(cfg.n_blocks):
        x_in = x
        n1, inv1 = _rmsnorm(x, cfg.norm_eps)
        q = (n1 @ W(LayerId(b, "q")).T).reshape(T, H, hd)
        k = (n1 @ W(LayerId(b, "k")).T).reshape(T, H, hd)
        v = (n1 @ W(LayerId(b, "v")).T).reshape(T, H, hd)
        q_rot = _rope_apply(q, cos, sin)
        k_rot = _rope_apply(k, cos, sin)
        scores = np.einsum("thd,shd->hts", q_rot, k_rot) * scale
        mask = np.triu(np.ones((T, T), dtype=bool), k=1)
        scores = np.where(mask[None, :, :], -np.inf, scores)
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        probs = e / e.sum(axis=-1, keepdims=True)
        attn = np.einsum("hts,shd->thd", probs, v).reshape(T, cfg.d_model)
        o = attn @ W(LayerId(b, "o")).T
        x_mid = x_in + o
        n2, inv2 = _rmsnorm(x_mid, cfg.norm_eps)
        up = n2 @ W(LayerId(b, "up")).T
        gate = n2 @ W(LayerId(b, "gate")).T
        act, sig = _silu(gate)
        h = up * act
        down = h @ W(LayerId(b, "down")).T
        x = x_mid + down
        if want_tape:
            blocks.append(BlockTape(x_in, n1, inv1, q_rot, k_rot, v, probs,
                                    attn, x_mid, n2, inv2, up, gate, sig, h))

    normed_f, inv_f = _rmsnorm(x, cfg.norm_eps)
    logits = normed_f @ weights.lm_head.astype(np.float64).T
    if not want_tape:
        return logits, None
    return logits, ForwardTape(tokens, blocks, x, inv_f, normed_f, logits, mats)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def token_losses(logits, tokens) -> np.ndarray:
    """Per-position next-token cross entropy in nats (length T-1)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    z = logits[:-1]
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    return lse - z[np.arange(len(tokens) - 1), tokens[1:]]


def teacher_forced_loss(weights: ModelWeights, tokens, provider=None):
    """Mean next-token cross entropy (nats) and perplexity = exp(loss)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) < 2:
        raise ValueError("need at least 2 tokens")
    logits, _ = forward(weights, tokens, provider)
    per_token = token_losses(logits, tokens)
    loss = float(per_token.mean())
    return loss, float(np.exp(loss)), per_token


@dataclass
class GradientBundle:
    """Weight gradients dL/dW and per-token output gradients dL/dy for every
    linear layer. Embeddings and the unembedding are deliberately absent."""
    weight_grads: dict      # LayerId -> (out, in)
    output_grads: dict      # LayerId -> (T, out)


def backward(weights: ModelWeights, tokens, provider=None):
    """Reverse-mode pass over the fixed block graph.

    Returns (loss, GradientBundle, tape). The tape carries the captured
    per-layer inputs for downstream calibration work.
    """
    cfg = weights.config
    tokens = np.asarray(tokens, dtype=np.int64)
    T = len(tokens)
    if T < 2:
        raise ValueError("need at least 2 tokens")
    logits, tape = forward(weights, tokens, provider, want_tape=True)
    H, hd, d = cfg.n_heads, cfg.head_dim, cfg.d_model
    cos, sin = _rope_tables(T, hd)
    scale = 1.0 / np.sqrt(hd)

    per_token = token_losses(logits, tokens)
    loss = float(per_token.mean())

    # dL/dlogits: softmax minus one-hot on predicting rows, mean over T-1
    probs_out = _softmax(logits)
    dlogits = np.zeros_like(logits)
    dlogits[:-1] = probs_out[:-1]
    dlogits[np.arange(T - 1), tokens[1:]] -= 1.0
    dlogits /= (T - 1)

    lm = weights.lm_head.astype(np.float64)
    dnormed_f = dlogits @ lm
    dx = _rmsnorm_backward(dnormed_f, tape.x_final, tape.inv_f, d)

    wgrads, ograds = {}, {}
    for b in range(cfg.n_blocks - 1, -1, -1):
        bt = tape.blocks[b]
        Wd = tape.provider_mats[LayerId(b, "down")]
        Wu = tape.provider_mats[LayerId(b, "up")]
        Wg = tape.provider_mats[LayerId(b, "gate")]
        Wo = tape.provider_mats[LayerId(b, "o")]
        Wq = tape.provider_mats[LayerId(b, "q")]
        Wk = tape.provider_mats[LayerId(b, "k")]
        Wv = tape.provider_mats[LayerId(b, "v")]

        # MLP half: x = x_mid + down(h)
        ddown = dx
        ograds[LayerId(b, "down")] = ddown
        wgrads[LayerId(b, "down")] = ddown.T @ bt.h
        dh = ddown @ Wd
        act = bt.gate * bt.sig
        dup = dh * act
        dact = dh * bt.up
        dgate = dact * bt.sig * (1.0 + bt.gate * (1.0 - bt.sig))
        ograds[LayerId(b, "up")] = dup
        wgrads[LayerId(b, "up")] = dup.T @ bt.n2
        ograds[LayerId(b, "gate")] = dgate
        wgrads[LayerId(b, "gate")] = dgate.T @ bt.n2
        dn2 = dup @ Wu + dgate @ Wg
        dx_mid = dx + _rmsnorm_backward(dn2, bt.x_mid, bt.inv2, d)

        # attention half: x_mid = x_in + o(attn)
        do = dx_mid
        ograds[LayerId(b, "o")] = do
        wgrads[LayerId(b, "o")] = do.T @ bt.attn_cat
        dattn = (do @ Wo).reshape(T, H, hd)
        dprobs = np.einsum("thd,shd->hts", dattn, bt.v)
        dv = np.einsum("hts,thd->shd", bt.probs, dattn)
        dscores = bt.probs * (dprobs - np.sum(dprobs * bt.probs,
                                              axis=-1, keepdims=True))
        dq_rot = np.einsum("hts,shd->thd", dscores, bt.k_rot) * scale
        dk_rot = np.einsum("hts,thd->shd", dscores, bt.q_rot) * scale
        dq = _rope_unapply_grad(dq_rot, cos, sin).reshape(T, d)
        dk = _rope_unapply_grad(dk_rot, cos, sin).reshape(T, d)
        dv = dv.reshape(T, d)
        ograds[LayerId(b, "q")] = dq
        wgrads[LayerId(b, "q")] = dq.T @ bt.n1
        ograds[LayerId(b, "k")] = dk
        wgrads[LayerId(b, "k")] = dk.T @ bt.n1
        ograds[LayerId(b, "v")] = dv
        wgrads[LayerId(b, "v")] = dv.T @ bt.n1
        dn1 = dq @ Wq + dk @ Wk + dv @ Wv
        dx = dx_mid + _rmsnorm_backward(dn1, bt.x_in, bt.inv1, d)

    bundle = GradientBundle(wgrads, ograds)
    return loss, bundle, tape


def layer_inputs(tape: ForwardTape) -> dict:
    """Captured input activations per linear layer, (T, in_dim) each."""
    out = {}
    for b, bt in enumerate(tape.blocks):
        out[LayerId(b, "q")] = bt.n1
        out[LayerId(b, "k")] = bt.n1
        out[LayerId(b, "v")] = bt.n1
        out[LayerId(b, "o")] = bt.attn_cat
        out[LayerId(b, "up")] = bt.n2
        out[LayerId(b, "gate")] = bt.n2
        out[LayerId(b, "down")] = bt.h
    return out


def block_residuals(tape: ForwardTape) -> np.ndarray:
    """Residual-stream vectors entering each block, shape (n_blocks, T, d)."""
    return np.stack([bt.x_in for bt in tape.blocks])
