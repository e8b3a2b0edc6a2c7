"""Deterministic synthetic byte corpus.

Text is built from a seeded order-1 word chain over a fixed vocabulary, so it
has learnable structure (far from uniform bytes) while staying reproducible:
same seed and length give the same file byte for byte.
"""

from __future__ import annotations

import hashlib

import numpy as np

_WORDS = [
    "the", "unit", "reads", "its", "queue", "and", "stores", "a", "frame",
    "then", "sensor", "logs", "every", "value", "before", "link", "drops",
    "or", "node", "sends", "packet", "to", "cache", "after", "timer", "fires",
    "state", "shifts", "when", "clock", "ticks", "buffer", "holds", "data",
]
_STOPS = [". ", ", ", "; "]


def generate_text(seed: int, n_chars: int) -> str:
    """Seeded word-chain text of exactly n_chars characters."""
    if n_chars < 1:
        raise ValueError("n_chars must be >= 1")
    rng = np.random.default_rng(seed)
    n = len(_WORDS)
    # seeded sparse transition preferences make the chain non-uniform
    pref = rng.random((n, n)) ** 4
    pref /= pref.sum(axis=1, keepdims=True)
    parts = []
    total = 0
    w = int(rng.integers(n))
    since_stop = 0
    while total < n_chars:
        word = _WORDS[w]
        since_stop += 1
        if since_stop >= int(rng.integers(4, 9)):
            word += _STOPS[int(rng.integers(len(_STOPS)))]
            since_stop = 0
        else:
            word += " "
        parts.append(word)
        total += len(word)
        w = int(rng.choice(n, p=pref[w]))
    return "".join(parts)[:n_chars]


def write_corpus(path: str, seed: int, n_chars: int) -> None:
    with open(path, "w") as f:
        f.write(generate_text(seed, n_chars))


def load_corpus(path: str) -> np.ndarray:
    """Corpus file as a byte-token array (values 0..255)."""
    with open(path, "rb") as f:
        data = f.read()
    if not data:
        raise ValueError(f"empty corpus file {path}")
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def corpus_hash(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        h.update(f.read())
    return h.hexdigest()


def sample_chunks(tokens: np.ndarray, seq_len: int, n_samples: int,
                  seed: int = 0) -> list:
    """n_samples seeded random windows of seq_len tokens each."""
    if seq_len < 2:
        raise ValueError("seq_len must be >= 2")
    if len(tokens) < seq_len:
        raise ValueError(f"corpus has {len(tokens)} tokens, need {seq_len}")
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, len(tokens) - seq_len + 1, n_samples)
    return [tokens[s:s + seq_len].copy() for s in starts]


def contiguous_chunks(tokens: np.ndarray, seq_len: int, n_samples: int,
                      offset: int = 0) -> list:
    """Non-overlapping windows starting at offset; errors if short."""
    need = offset + seq_len * n_samples
    if len(tokens) < need:
        raise ValueError(f"corpus has {len(tokens)} tokens, need {need}")
    return [tokens[offset + i * seq_len: offset + (i + 1) * seq_len].copy()
            for i in range(n_samples)]
