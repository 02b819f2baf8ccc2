"""Backend equivalence: the jitted kernels must agree with the pure-numpy
fallbacks (exactly for the integer kernels, tightly for the float ones)."""

import numpy as np
import pytest

from wsqa import _kernels
from wsqa._kernels import _numpy as np_impl

numba_impl = pytest.importorskip("wsqa._kernels._numba")


def test_active_backend_is_exposed():
    assert _kernels.BACKEND in ("numba", "numpy")


def test_rle_encode_equivalence():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 400))
        flat = (rng.random(n) < rng.uniform(0.05, 0.95)).astype(np.uint8)
        a = np_impl.rle_encode(flat)
        b = numba_impl.rle_encode(flat)
        assert np.array_equal(a, b), flat


def test_rle_decode_equivalence():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(1, 400))
        flat = (rng.random(n) < 0.4).astype(np.uint8)
        counts = np_impl.rle_encode(flat)
        assert np.array_equal(
            np_impl.rle_decode(counts, n), numba_impl.rle_decode(counts, n)
        )


def test_intersect_count_equivalence():
    rng = np.random.default_rng(2)
    for _ in range(50):
        h, w = rng.integers(1, 40, 2)
        a = (rng.random((h, w)) < 0.5).astype(np.uint8)
        b = (rng.random((h, w)) < 0.5).astype(np.uint8)
        assert np_impl.intersect_count(a, b) == numba_impl.intersect_count(a, b)


def test_gmm_em_step_equivalence():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = np.concatenate([rng.normal(0, 1, 300), rng.normal(8, 2, 200)])
        w = np.array([0.5, 0.5])
        mu = np.array([-1.0, 5.0])
        var = np.array([2.0, 3.0])
        rn = np_impl.gmm_em_step(x, w, mu, var)
        rb = numba_impl.gmm_em_step(x, w, mu, var)
        for a, b in zip(rn, rb):
            assert np.allclose(a, b, rtol=1e-10, atol=1e-8)
        ll_n = np_impl.gmm_log_likelihood(x, w, mu, var)
        ll_b = numba_impl.gmm_log_likelihood(x, w, mu, var)
        assert ll_n == pytest.approx(ll_b, rel=1e-12)
