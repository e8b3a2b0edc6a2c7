import numpy as np
import pytest

from dpq import quant as Q
from dpq.model import LayerId


def test_hand_example_two_bit():
    # one channel spanning [0, 1]: 2-bit codes and midpoint reconstruction
    W = np.array([[0.0, 0.3, 0.6, 1.0]])
    q = Q.quantize_layer(W, 2, 2)
    assert q.codes.tolist() == [[0, 1, 2, 3]]
    deq = Q.dequantize(q, 2)
    assert np.allclose(deq, [[0.125, 0.375, 0.625, 0.875]])


def test_truncation_is_prefix():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(8, 16))
    q = Q.quantize_layer(W, 6, 3)
    for b in range(3, 6):
        lo_codes = q.codes >> (6 - b)
        hi_codes = q.codes >> (6 - (b + 1))
        assert np.array_equal(lo_codes, hi_codes >> 1)


def test_mse_monotone_in_bits():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(16, 32))
    q = Q.quantize_layer(W, 6, 3)
    mses = [np.mean((Q.dequantize(q, b) - W) ** 2) for b in range(3, 7)]
    assert all(mses[i + 1] <= mses[i] for i in range(3))


def test_degenerate_channel_reconstructs_exactly():
    W = np.array([[2.5, 2.5, 2.5], [0.0, 1.0, 2.0]])
    q = Q.quantize_layer(W, 4, 3)
    for b in (3, 4):
        assert np.allclose(Q.dequantize(q, b)[0], 2.5)


def test_quantize_rejects_bad_inputs():
    with pytest.raises(Q.QuantError):
        Q.quantize_layer(np.ones((2, 2)), 9, 3)
    with pytest.raises(Q.QuantError):
        Q.quantize_layer(np.ones((2, 2)), 6, 1)
    with pytest.raises(Q.QuantError):
        Q.quantize_layer(np.array([[np.nan, 1.0]]), 6, 3)


def test_dequantize_range_check():
    q = Q.quantize_layer(np.ones((2, 3)), 6, 3)
    with pytest.raises(Q.QuantError):
        Q.dequantize(q, 2)
    with pytest.raises(Q.QuantError):
        Q.dequantize(q, 7)


def test_delta_weights_orientation():
    rng = np.random.default_rng(2)
    q = Q.quantize_layer(rng.normal(size=(4, 8)), 6, 3)
    d = Q.delta_weights(q, 3, 6)
    assert np.allclose(d, Q.dequantize(q, 6) - Q.dequantize(q, 3))
    with pytest.raises(Q.QuantError):
        Q.delta_weights(q, 5, 5)


def test_gemv_matches_dense():
    rng = np.random.default_rng(3)
    q = Q.quantize_layer(rng.normal(size=(4, 8)), 6, 3)
    x = rng.normal(size=8)
    assert np.allclose(Q.gemv(q, 4, x), Q.dequantize(q, 4) @ x)
    with pytest.raises(Q.QuantError):
        Q.gemv(q, 4, np.zeros(5))


def test_pack_unpack_round_trip():
    rng = np.random.default_rng(4)
    for n_bits in (3, 5, 6, 8):
        codes = rng.integers(0, 1 << n_bits, size=(7, 13)).astype(np.uint16)
        blob = Q.pack_codes(codes, n_bits)
        assert len(blob) == -(-codes.size * n_bits // 8)
        assert np.array_equal(Q.unpack_codes(blob, n_bits, codes.shape), codes)


def test_store_round_trip(tmp_path, toy_store):
    p1 = str(tmp_path / "a.dpqs")
    p2 = str(tmp_path / "b.dpqs")
    Q.save_store(toy_store, p1)
    back = Q.load_store(p1)
    assert back.n_bits == toy_store.n_bits
    assert back.b_min == toy_store.b_min
    assert back.config_hash == toy_store.config_hash
    for lid, q in toy_store.layers.items():
        assert np.array_equal(back.layers[lid].codes, q.codes)
        assert np.array_equal(back.layers[lid].lo, q.lo)
    # re-saving the loaded store is byte-identical
    Q.save_store(back, p2)
    assert Q.file_hash(p1) == Q.file_hash(p2)


def test_store_rejects_wrong_magic(tmp_path):
    p = str(tmp_path / "bad.dpqs")
    with open(p, "wb") as f:
        f.write(b"NOPE" + b"\x00" * 64)
    with pytest.raises(Q.QuantError):
        Q.load_store(p)


def test_param_counts(toy_store):
    counts = toy_store.param_counts()
    assert counts[LayerId(0, "q")] == 32 * 32
    assert counts[LayerId(0, "up")] == 64 * 32
