"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

Backend selection: set SPECDEC_BACKEND=numpy to force the uncompiled
fallback, SPECDEC_BACKEND=numba to require numba (import error if missing).
Default is numba when importable, numpy otherwise.

The attention kernel accumulates scores and weighted values strictly in key
index order (committed cache rows first, then block rows).  Entries hidden by
the visibility row are skipped entirely, which is arithmetically identical to
adding 0.0, so a tree-masked pass produces bit-identical results to the
equivalent sequential decode within one backend.  Do not replace the inner
loops with matmul/np.sum: pairwise summation would break that guarantee.
"""

import math
import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    njit = None
    HAS_NUMBA = False


def _resolve_backend() -> str:
    choice = os.environ.get("SPECDEC_BACKEND", "").strip().lower()
    if choice == "":
        return "numba" if HAS_NUMBA else "numpy"
    if choice not in ("numba", "numpy"):
        raise RuntimeError(f"SPECDEC_BACKEND must be 'numba' or 'numpy', got {choice!r}")
    if choice == "numba" and not HAS_NUMBA:
        raise RuntimeError("SPECDEC_BACKEND=numba but numba is not importable")
    return choice


BACKEND = _resolve_backend()


def _attend_token(q, k_cache, v_cache, n_ctx, blk_start, n_blk, vis_row, scale, out):
    """Attention for one query token over cache rows [0, n_ctx) plus a block.

    q: (n_q_heads, d_head) rotary-encoded query.
    k_cache/v_cache: (capacity, n_kv_heads, d_head); rows [blk_start,
      blk_start+n_blk) hold the current block's keys/values.
    vis_row: (n_blk,) uint8; block row b participates iff vis_row[b] != 0.
    out: (n_q_heads, d_head), overwritten.

    Accumulation is float64 regardless of input dtype.
    """
    n_q = q.shape[0]
    d_h = q.shape[1]
    n_kv = k_cache.shape[1]
    group = n_q // n_kv
    scores = np.empty(n_ctx + n_blk, np.float64)
    for hq in range(n_q):
        hk = hq // group
        m = -1.0e300
        for j in range(n_ctx):
            s = 0.0
            for t in range(d_h):
                s += float(q[hq, t]) * float(k_cache[j, hk, t])
            s *= scale
            scores[j] = s
            if s > m:
                m = s
        for b in range(n_blk):
            if vis_row[b] != 0:
                j = blk_start + b
                s = 0.0
                for t in range(d_h):
                    s += float(q[hq, t]) * float(k_cache[j, hk, t])
                s *= scale
                scores[n_ctx + b] = s
                if s > m:
                    m = s
        den = 0.0
        acc = np.zeros(d_h, np.float64)
        for j in range(n_ctx):
            w = math.exp(scores[j] - m)
            den += w
            for t in range(d_h):
                acc[t] += w * float(v_cache[j, hk, t])
        for b in range(n_blk):
            if vis_row[b] != 0:
                j = blk_start + b
                w = math.exp(scores[n_ctx + b] - m)
                den += w
                for t in range(d_h):
                    acc[t] += w * float(v_cache[j, hk, t])
        for t in range(d_h):
            out[hq, t] = acc[t] / den


attend_token_numpy = _attend_token
attend_token_numba = njit(cache=True)(_attend_token) if HAS_NUMBA else None

if BACKEND == "numba":
    attend_token = attend_token_numba
else:
    attend_token = attend_token_numpy


def benchmark_backends(n_ctx=256, n_q=8, n_kv=2, d_h=16, iters=200, seed=0):
    """Time the numba and numpy attention kernels on identical inputs.

    Returns a dict with per-call seconds for each available backend and
    the max elementwise deviation between their outputs.
    """
    import time

    rng = np.random.default_rng(seed)
    cap = n_ctx + 1
    q = rng.standard_normal((n_q, d_h))
    k = rng.standard_normal((cap, n_kv, d_h))
    v = rng.standard_normal((cap, n_kv, d_h))
    vis = np.ones(1, np.uint8)
    scale = 1.0 / math.sqrt(d_h)
    results = {"n_ctx": n_ctx, "iters": iters}

    out_np = np.empty((n_q, d_h))
    t0 = time.perf_counter()
    for _ in range(max(1, iters // 20)):  # fallback is slow; fewer iters
        attend_token_numpy(q, k, v, n_ctx, n_ctx, 1, vis, scale, out_np)
    results["numpy_s_per_call"] = (time.perf_counter() - t0) / max(1, iters // 20)

    if HAS_NUMBA:
        out_nb = np.empty((n_q, d_h))
        attend_token_numba(q, k, v, n_ctx, n_ctx, 1, vis, scale, out_nb)  # warmup/compile
        t0 = time.perf_counter()
        for _ in range(iters):
            attend_token_numba(q, k, v, n_ctx, n_ctx, 1, vis, scale, out_nb)
        results["numba_s_per_call"] = (time.perf_counter() - t0) / iters
        results["max_abs_diff"] = float(np.max(np.abs(out_nb - out_np)))
        results["speedup"] = results["numpy_s_per_call"] / results["numba_s_per_call"]
    return results
