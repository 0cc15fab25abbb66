"""Hot sampling kernels with a numba path and a vectorized numpy fallback.

Both paths consume the same pre-drawn random candidates.  Top-k and the
truncated normal agree bit for bit; gamma draws agree to rounding, since
numpy's vectorized pow/log may differ from libm in the last ulp.  Set ``MULAN_NO_JIT=1``
to force the numpy path (numba is also skipped when it is not installed).
"""

import math
import os

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("MULAN_NO_JIT", "0").lower() not in ("1", "true", "yes")

# Rejection candidates drawn per output.  Marsaglia-Tsang accepts > 95% and the
# |x| < 3 truncation accepts 99.73%, so exhausting these is ~1e-10 per draw.
N_CANDIDATES = 8


def _maybe_njit(fn):
    if HAS_NUMBA:
        return numba.njit(cache=True)(fn)
    return fn


# ---------------------------------------------------------------------------
# Marsaglia-Tsang gamma variates
# ---------------------------------------------------------------------------


def _gamma_mt_loop(shape, normals, uniforms, boost):
    n, r = normals.shape
    out = np.empty(n)
    ok = np.ones(n, dtype=np.bool_)
    a = shape + 1.0 if shape < 1.0 else shape
    d = a - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    for i in range(n):
        found = False
        for j in range(r):
            x = normals[i, j]
            v = 1.0 + c * x
            if v <= 0.0:
                continue
            v = v * v * v
            u = uniforms[i, j]
            if u < 1.0 - 0.0331 * x * x * x * x or math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
                out[i] = d * v
                found = True
                break
        if not found:
            out[i] = 0.0
            ok[i] = False
        elif shape < 1.0:
            out[i] = out[i] * boost[i] ** (1.0 / shape)
    return out, ok


_gamma_mt_jit = _maybe_njit(_gamma_mt_loop)


def _gamma_mt_numpy(shape, normals, uniforms, boost):
    a = shape + 1.0 if shape < 1.0 else shape
    d = a - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    v = 1.0 + c * normals
    pos = v > 0.0
    vp = np.where(pos, v, 1.0)
    v3 = vp * vp * vp
    x = normals
    with np.errstate(divide="ignore"):
        squeeze = uniforms < 1.0 - 0.0331 * x * x * x * x
        full = np.log(uniforms) < 0.5 * x * x + d * (1.0 - v3 + np.log(v3))
    accept = pos & (squeeze | full)
    ok = accept.any(axis=1)
    first = accept.argmax(axis=1)
    rows = np.arange(normals.shape[0])
    out = np.where(ok, d * v3[rows, first], 0.0)
    if shape < 1.0:
        out = np.where(ok, out * boost ** (1.0 / shape), 0.0)
    return out, ok


def standard_gamma(shape, size, rng, use_numba=None):
    """Gamma(shape, scale=1) draws by the Marsaglia-Tsang squeeze method.

    For ``shape < 1`` a Gamma(shape + 1) draw is boosted by ``U**(1/shape)``.
    """
    if shape <= 0:
        raise ValueError("gamma shape must be positive")
    use_numba = USE_NUMBA if use_numba is None else use_numba and HAS_NUMBA
    n = int(np.prod(size))
    normals = rng.standard_normal((n, N_CANDIDATES))
    uniforms = rng.random((n, N_CANDIDATES))
    boost = rng.random(n)
    kernel = _gamma_mt_jit if use_numba else _gamma_mt_numpy
    out, ok = kernel(float(shape), normals, uniforms, boost)
    while not ok.all():
        bad = np.flatnonzero(~ok)
        redo, redo_ok = kernel(
            float(shape),
            rng.standard_normal((bad.size, N_CANDIDATES)),
            rng.random((bad.size, N_CANDIDATES)),
            rng.random(bad.size),
        )
        out[bad] = redo
        ok[bad] = redo_ok
    return out.reshape(size)


# ---------------------------------------------------------------------------
# Row-wise top-k to k-hot, ties to the lowest index
# ---------------------------------------------------------------------------


def _topk_loop(scores, k):
    n, m = scores.shape
    out = np.zeros((n, m))
    for i in range(n):
        taken = np.zeros(m, dtype=np.bool_)
        for _ in range(k):
            best = -1
            for j in range(m):
                if taken[j]:
                    continue
                if best < 0 or scores[i, j] > scores[i, best]:
                    best = j
            taken[best] = True
            out[i, best] = 1.0
    return out


_topk_jit = _maybe_njit(_topk_loop)


def _topk_numpy(scores, k):
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    out = np.zeros(scores.shape)
    np.put_along_axis(out, order, 1.0, axis=1)
    return out


def topk_rows(scores, k, use_numba=None):
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError("scores must be 2-D (rows, m)")
    if not 0 <= k <= scores.shape[1]:
        raise ValueError(f"k={k} must lie in [0, m={scores.shape[1]}]")
    # argpartition beats the compiled loop at these sizes, so numba is opt-in here
    use_numba = bool(use_numba) and HAS_NUMBA
    return (_topk_jit if use_numba else _topk_numpy)(scores, int(k))


# ---------------------------------------------------------------------------
# Truncated standard normal on (-tau, tau) by rejection
# ---------------------------------------------------------------------------


def _truncnorm_loop(candidates, tau):
    n, r = candidates.shape
    out = np.zeros(n)
    ok = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        for j in range(r):
            x = candidates[i, j]
            if -tau < x < tau:
                out[i] = x
                ok[i] = True
                break
    return out, ok


_truncnorm_jit = _maybe_njit(_truncnorm_loop)


def _truncnorm_numpy(candidates, tau):
    inside = np.abs(candidates) < tau
    ok = inside.any(axis=1)
    first = inside.argmax(axis=1)
    out = np.where(ok, candidates[np.arange(candidates.shape[0]), first], 0.0)
    return out, ok


def truncated_normal(size, tau, rng, use_numba=None):
    use_numba = USE_NUMBA if use_numba is None else use_numba and HAS_NUMBA
    kernel = _truncnorm_jit if use_numba else _truncnorm_numpy
    n = int(np.prod(size))
    out, ok = kernel(rng.standard_normal((n, N_CANDIDATES)), float(tau))
    while not ok.all():
        bad = np.flatnonzero(~ok)
        redo, redo_ok = kernel(rng.standard_normal((bad.size, N_CANDIDATES)), float(tau))
        out[bad] = redo
        ok[bad] = redo_ok
    return out.reshape(size)
