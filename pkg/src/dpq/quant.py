"""Multi-scale nested quantization store.

One n-bit code array per layer; every b-bit variant (b_min <= b <= n) is
recovered by truncating codes to their top b bits, with per-output-channel
affine (lo, hi) parameters and midpoint reconstruction. Storage is n bits per
weight plus two floats per channel no matter how many bitwidths are served.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import KINDS, LayerId, ModelWeights, layer_ids

STORE_MAGIC = b"DPQS"
STORE_VERSION = 1


class QuantError(Exception):
    pass


@dataclass
class QuantizedLayer:
    codes: np.ndarray           # uint16 (rows, cols), each < 2**n_bits
    n_bits: int
    b_min: int
    lo: np.ndarray              # (rows,) float32 per-channel minimum
    hi: np.ndarray              # (rows,) float32 per-channel maximum

    @property
    def shape(self):
        return self.codes.shape

    def __post_init__(self):
        self._deq_cache = {}


def quantize_layer(W: np.ndarray, n_bits: int, b_min: int) -> QuantizedLayer:
    """Per-output-channel affine quantization to n_bits codes.

    lo/hi are the channel min/max; step = (hi-lo)/2**n; codes are
    clamp(floor((w-lo)/step), 0, 2**n - 1). A degenerate channel (hi == lo)
    gets all-zero codes and reconstructs to lo exactly at every bitwidth.
    """
    if not (2 <= b_min <= n_bits <= 8):
        raise QuantError(f"need 2 <= b_min <= n_bits <= 8, got ({b_min}, {n_bits})")
    W = np.asarray(W, dtype=np.float64)
    if not np.all(np.isfinite(W)):
        raise QuantError("non-finite weights")
    lo = W.min(axis=1)
    hi = W.max(axis=1)
    span = hi - lo
    levels = 1 << n_bits
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = (W - lo[:, None]) * (levels / np.where(span == 0, 1.0, span))[:, None]
    codes = np.clip(np.floor(scaled), 0, levels - 1).astype(np.uint16)
    codes[span == 0, :] = 0
    return QuantizedLayer(codes, n_bits, b_min,
                          lo.astype(np.float32), hi.astype(np.float32))


def dequantize(layer: QuantizedLayer, b: int) -> np.ndarray:
    """Midpoint reconstruction of the b-bit variant (float64)."""
    if not (layer.b_min <= b <= layer.n_bits):
        raise QuantError(f"bitwidth {b} outside [{layer.b_min}, {layer.n_bits}]")
    cached = layer._deq_cache.get(b)
    if cached is not None:
        return cached
    trunc = layer.codes >> (layer.n_bits - b)
    lo = layer.lo.astype(np.float64)[:, None]
    span = (layer.hi.astype(np.float64) - layer.lo.astype(np.float64))[:, None]
    # degenerate channels (span 0) reduce to lo exactly
    W = lo + (trunc.astype(np.float64) + 0.5) * span / (1 << b)
    layer._deq_cache[b] = W
    return W


def delta_weights(layer: QuantizedLayer, l: int, h: int) -> np.ndarray:
    """dequantize(h) - dequantize(l); the high/low output-gap matrix."""
    if l >= h:
        raise QuantError(f"need l < h, got ({l}, {h})")
    key = ("delta", l, h)
    cached = layer._deq_cache.get(key)
    if cached is None:
        cached = dequantize(layer, h) - dequantize(layer, l)
        layer._deq_cache[key] = cached
    return cached


def gemv(layer: QuantizedLayer, b: int, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.shape[1]:
        raise QuantError(f"gemv dimension mismatch: {x.shape[-1]} vs {layer.shape[1]}")
    return dequantize(layer, b) @ x


@dataclass
class BitPlaneStore:
    layers: dict                # LayerId -> QuantizedLayer
    n_bits: int
    b_min: int
    config_hash: str

    def param_counts(self) -> dict:
        return {lid: int(np.prod(q.shape)) for lid, q in self.layers.items()}


def quantize_model(weights: ModelWeights, n_bits: int, b_min: int) -> BitPlaneStore:
    layers = {lid: quantize_layer(weights.linears[lid], n_bits, b_min)
              for lid in layer_ids(weights.config)}
    return BitPlaneStore(layers, n_bits, b_min, weights.config.hash())


# ---------------------------------------------------------------------------
# Bit packing (codes packed n_bits each, LSB-first bit order)
# ---------------------------------------------------------------------------

def pack_codes(codes: np.ndarray, n_bits: int) -> bytes:
    flat = codes.reshape(-1).astype(np.uint16)
    bits = ((flat[:, None] >> np.arange(n_bits)) & 1).astype(np.uint8)
    return np.packbits(bits.reshape(-1), bitorder="little").tobytes()


def unpack_codes(blob: bytes, n_bits: int, shape) -> np.ndarray:
    count = int(np.prod(shape))
    bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8),
                         count=count * n_bits, bitorder="little")
    vals = bits.reshape(count, n_bits).astype(np.uint16) @ \
        (1 << np.arange(n_bits, dtype=np.uint16))
    return vals.astype(np.uint16).reshape(shape)


# ---------------------------------------------------------------------------
# Store file: fixed binary header + per-layer records.
# Header: magic, version u32, n_bits u8, b_min u8, bit_order u8 (0 = LSB-first
# within each code, packed little-endian), layer count u32, config hash (hex).
# ---------------------------------------------------------------------------

def save_store(store: BitPlaneStore, path: str) -> None:
    with open(path, "wb") as f:
        f.write(STORE_MAGIC)
        f.write(struct.pack("<IBBBI", STORE_VERSION, store.n_bits,
                            store.b_min, 0, len(store.layers)))
        f.write(store.config_hash.encode("ascii"))
        for lid in sorted(store.layers, key=lambda l: (l.block, KINDS.index(l.kind))):
            q = store.layers[lid]
            name = lid.name.encode("ascii")
            packed = pack_codes(q.codes, q.n_bits)
            f.write(struct.pack("<H", len(name)))
            f.write(name)
            f.write(struct.pack("<IIQ", q.shape[0], q.shape[1], len(packed)))
            f.write(np.ascontiguousarray(q.lo, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(q.hi, dtype="<f4").tobytes())
            f.write(packed)


def load_store(path: str) -> BitPlaneStore:
    with open(path, "rb") as f:
        if f.read(4) != STORE_MAGIC:
            raise QuantError("not a dpq store file")
        version, n_bits, b_min, bit_order, n_layers = struct.unpack("<IBBBI", f.read(11))
        if version != STORE_VERSION:
            raise QuantError(f"unsupported store version {version}")
        if bit_order != 0:
            raise QuantError("unsupported code bit order")
        config_hash = f.read(64).decode("ascii")
        layers = {}
        for _ in range(n_layers):
            (name_len,) = struct.unpack("<H", f.read(2))
            lid = LayerId.from_name(f.read(name_len).decode("ascii"))
            rows, cols, packed_len = struct.unpack("<IIQ", f.read(16))
            lo = np.frombuffer(f.read(4 * rows), dtype="<f4").copy()
            hi = np.frombuffer(f.read(4 * rows), dtype="<f4").copy()
            codes = unpack_codes(f.read(packed_len), n_bits, (rows, cols))
            layers[lid] = QuantizedLayer(codes, n_bits, b_min, lo, hi)
    return BitPlaneStore(layers, n_bits, b_min, config_hash)


def file_hash(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
