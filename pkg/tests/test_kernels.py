import math

import numpy as np
import pytest

from specdec import kernels


def random_inputs(seed, n_ctx=12, n_blk=4, n_q=4, n_kv=2, d_h=8):
    rng = np.random.default_rng(seed)
    cap = n_ctx + n_blk
    q = rng.standard_normal((n_q, d_h))
    k = rng.standard_normal((cap, n_kv, d_h))
    v = rng.standard_normal((cap, n_kv, d_h))
    vis = (rng.random(n_blk) < 0.5).astype(np.uint8)
    vis[0] = 1  # at least one visible block row
    return q, k, v, n_ctx, n_blk, vis, 1.0 / math.sqrt(d_h)


def reference_attention(q, k, v, n_ctx, n_blk, vis, scale):
    """Dense softmax-attention oracle built from numpy primitives (different
    summation order than the kernel, hence compared approximately)."""
    n_q, d_h = q.shape
    n_kv = k.shape[1]
    group = n_q // n_kv
    rows = list(range(n_ctx)) + [n_ctx + b for b in range(n_blk) if vis[b]]
    out = np.empty((n_q, d_h))
    for hq in range(n_q):
        hk = hq // group
        s = np.array([q[hq] @ k[j, hk] for j in range(n_ctx + n_blk)]) * scale
        w = np.exp(s[rows] - np.max(s[rows]))
        w /= w.sum()
        out[hq] = w @ v[rows, hk]
    return out


class TestBackends:
    def test_numba_available_here(self):
        # the package pins numba as a hard dependency in this environment
        assert kernels.HAS_NUMBA

    def test_backends_agree(self):
        for seed in range(10):
            q, k, v, n_ctx, n_blk, vis, scale = random_inputs(seed)
            a = np.empty_like(q)
            b = np.empty_like(q)
            kernels.attend_token_numpy(q, k, v, n_ctx, n_ctx, n_blk, vis, scale, a)
            kernels.attend_token_numba(q, k, v, n_ctx, n_ctx, n_blk, vis, scale, b)
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)

    def test_matches_dense_oracle(self):
        for seed in range(10):
            q, k, v, n_ctx, n_blk, vis, scale = random_inputs(seed + 100)
            got = np.empty_like(q)
            kernels.attend_token(q, k, v, n_ctx, n_ctx, n_blk, vis, scale, got)
            ref = reference_attention(q, k, v, n_ctx, n_blk, vis, scale)
            np.testing.assert_allclose(got, ref, rtol=1e-10)

    def test_masked_rows_are_invisible(self):
        """Garbage in hidden block rows cannot change the output at all."""
        q, k, v, n_ctx, n_blk, vis, scale = random_inputs(7)
        vis = np.array([1, 0, 1, 0], np.uint8)
        base = np.empty_like(q)
        kernels.attend_token(q, k, v, n_ctx, n_ctx, n_blk, vis, scale, base)
        k2, v2 = k.copy(), v.copy()
        for b in range(n_blk):
            if not vis[b]:
                k2[n_ctx + b] = 1e6
                v2[n_ctx + b] = np.nan
        redo = np.empty_like(q)
        kernels.attend_token(q, k2, v2, n_ctx, n_ctx, n_blk, vis, scale, redo)
        assert np.array_equal(base, redo)

    def test_single_row_is_copy(self):
        """With one visible row, attention returns that row's value exactly."""
        q, k, v, _, _, _, scale = random_inputs(3)
        out = np.empty_like(q)
        vis = np.ones(1, np.uint8)
        kernels.attend_token(q, k, v, 0, 5, 1, vis, scale, out)
        group = q.shape[0] // k.shape[1]
        for hq in range(q.shape[0]):
            np.testing.assert_allclose(out[hq], v[5, hq // group], rtol=1e-15)


class TestBackendResolution:
    def test_explicit_choices(self, monkeypatch):
        monkeypatch.setenv("SPECDEC_BACKEND", "numpy")
        assert kernels._resolve_backend() == "numpy"
        monkeypatch.setenv("SPECDEC_BACKEND", " NUMBA ")
        assert kernels._resolve_backend() == "numba"
        monkeypatch.delenv("SPECDEC_BACKEND")
        assert kernels._resolve_backend() in ("numba", "numpy")

    def test_bad_choice_rejected(self, monkeypatch):
        monkeypatch.setenv("SPECDEC_BACKEND", "cuda")
        with pytest.raises(RuntimeError, match="SPECDEC_BACKEND"):
            kernels._resolve_backend()


class TestBenchmark:
    def test_report_fields(self):
        r = kernels.benchmark_backends(n_ctx=32, iters=20)
        assert r["numpy_s_per_call"] > 0
        assert r["numba_s_per_call"] > 0
        assert r["max_abs_diff"] < 1e-12
        assert r["speedup"] == r["numpy_s_per_call"] / r["numba_s_per_call"]
