"""Hot numeric kernels: numba-jitted loops with a pure-numpy fallback.

The backend is chosen once at import time from the ``FASDG_BACKEND``
environment variable:

* ``auto``  (default) - numba if importable, else numpy
* ``numba`` - require numba, fail loudly if missing
* ``numpy`` - force the vectorized numpy path

Both implementations of every kernel stay importable regardless of the
selection (``IMPLEMENTATIONS`` maps kernel name -> {"numpy": fn, "numba": fn})
so ``benchmarks/bench_kernels.py`` can time them side by side.

All kernels accept C-contiguous float32 or float64 arrays and are
deterministic: no threading, no fastmath. Loop kernels accumulate in double
precision, which the numpy path mirrors only approximately for float32, so
cross-backend agreement is to ~1e-6 in single precision (exact determinism is
per backend).
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import erf as _erf

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba present in normal installs
    numba = None
    _HAVE_NUMBA = False

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327

_choice = os.environ.get("FASDG_BACKEND", "auto").strip().lower()
if _choice not in ("auto", "numba", "numpy"):
    raise RuntimeError(
        f"FASDG_BACKEND must be one of auto/numba/numpy, got {_choice!r}"
    )
if _choice == "numba" and not _HAVE_NUMBA:
    raise RuntimeError("FASDG_BACKEND=numba but numba is not importable")

USE_NUMBA = _HAVE_NUMBA and _choice != "numpy"
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy implementations


def softmax_fwd_numpy(x):
    """Row softmax of a (rows, n) array with max subtraction."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd_numpy(y, dy):
    t = (dy * y).sum(axis=1, keepdims=True)
    return (dy - t) * y


def logistic_fwd_numpy(x):
    """Elementwise 1/(1+exp(-x)), overflow-safe on both tails."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gelu_fwd_numpy(x):
    return 0.5 * x * (1.0 + _erf(x * np.asarray(_INV_SQRT2, dtype=x.dtype)))


def gelu_bwd_numpy(x, dy):
    phi = np.exp(-0.5 * x * x) * np.asarray(_INV_SQRT_2PI, dtype=x.dtype)
    cdf = 0.5 * (1.0 + _erf(x * np.asarray(_INV_SQRT2, dtype=x.dtype)))
    return dy * (cdf + x * phi)


def layernorm_fwd_numpy(x, gamma, beta, eps):
    """Normalize rows of (rows, n); returns (y, mean, rstd) for the backward."""
    mean = x.mean(axis=1)
    var = ((x - mean[:, None]) ** 2).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None]) * rstd[:, None]
    return xhat * gamma + beta, mean, rstd


def layernorm_bwd_numpy(x, gamma, mean, rstd, dy):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx, dgamma, dbeta


def normrows_fwd_numpy(x):
    """Divide each row by its sum; returns (y, row_sums)."""
    s = x.sum(axis=1)
    return x / s[:, None], s


def normrows_bwd_numpy(y, s, dy):
    t = (dy * y).sum(axis=1, keepdims=True)
    return (dy - t) / s[:, None]


def adam_update_numpy(p, g, m, v, t, lr, beta1, beta2, eps):
    """One fused Adam step, in place on flat arrays p, m, v."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# loop implementations (jitted when numba is selected)
#
# Scalar accumulation is done in float64 regardless of input dtype.


def _softmax_fwd_loops(x):
    rows, n = x.shape
    out = np.empty_like(x)
    for i in range(rows):
        m = x[i, 0]
        for j in range(1, n):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(n):
            e = math.exp(float(x[i, j] - m))
            out[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(n):
            out[i, j] = out[i, j] * inv
    return out


def _softmax_bwd_loops(y, dy):
    rows, n = y.shape
    dx = np.empty_like(y)
    for i in range(rows):
        t = 0.0
        for j in range(n):
            t += float(dy[i, j]) * float(y[i, j])
        for j in range(n):
            dx[i, j] = (float(dy[i, j]) - t) * float(y[i, j])
    return dx


def _logistic_fwd_loops(x):
    n = x.shape[0]
    out = np.empty_like(x)
    for i in range(n):
        v = float(x[i])
        if v >= 0.0:
            out[i] = 1.0 / (1.0 + math.exp(-v))
        else:
            e = math.exp(v)
            out[i] = e / (1.0 + e)
    return out


def _gelu_fwd_loops(x):
    n = x.shape[0]
    out = np.empty_like(x)
    for i in range(n):
        v = float(x[i])
        out[i] = 0.5 * v * (1.0 + math.erf(v * _INV_SQRT2))
    return out


def _gelu_bwd_loops(x, dy):
    n = x.shape[0]
    dx = np.empty_like(x)
    for i in range(n):
        v = float(x[i])
        cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
        phi = math.exp(-0.5 * v * v) * _INV_SQRT_2PI
        dx[i] = float(dy[i]) * (cdf + v * phi)
    return dx


def _layernorm_fwd_loops(x, gamma, beta, eps):
    rows, n = x.shape
    out = np.empty_like(x)
    mean = np.empty(rows, dtype=x.dtype)
    rstd = np.empty(rows, dtype=x.dtype)
    for i in range(rows):
        s = 0.0
        for j in range(n):
            s += float(x[i, j])
        mu = s / n
        q = 0.0
        for j in range(n):
            d = float(x[i, j]) - mu
            q += d * d
        r = 1.0 / math.sqrt(q / n + eps)
        mean[i] = mu
        rstd[i] = r
        for j in range(n):
            out[i, j] = (float(x[i, j]) - mu) * r * float(gamma[j]) + float(beta[j])
    return out, mean, rstd


def _layernorm_bwd_loops(x, gamma, mean, rstd, dy):
    rows, n = x.shape
    dx = np.empty_like(x)
    dgamma = np.zeros(n, dtype=x.dtype)
    dbeta = np.zeros(n, dtype=x.dtype)
    for i in range(rows):
        mu = float(mean[i])
        r = float(rstd[i])
        m1 = 0.0
        m2 = 0.0
        for j in range(n):
            xh = (float(x[i, j]) - mu) * r
            dxh = float(dy[i, j]) * float(gamma[j])
            m1 += dxh
            m2 += dxh * xh
            dgamma[j] += float(dy[i, j]) * xh
            dbeta[j] += float(dy[i, j])
        m1 /= n
        m2 /= n
        for j in range(n):
            xh = (float(x[i, j]) - mu) * r
            dxh = float(dy[i, j]) * float(gamma[j])
            dx[i, j] = (dxh - m1 - xh * m2) * r
    return dx, dgamma, dbeta


def _normrows_fwd_loops(x):
    rows, n = x.shape
    out = np.empty_like(x)
    sums = np.empty(rows, dtype=x.dtype)
    for i in range(rows):
        s = 0.0
        for j in range(n):
            s += float(x[i, j])
        sums[i] = s
        inv = 1.0 / s
        for j in range(n):
            out[i, j] = float(x[i, j]) * inv
    return out, sums


def _normrows_bwd_loops(y, s, dy):
    rows, n = y.shape
    dx = np.empty_like(y)
    for i in range(rows):
        t = 0.0
        for j in range(n):
            t += float(dy[i, j]) * float(y[i, j])
        inv = 1.0 / float(s[i])
        for j in range(n):
            dx[i, j] = (float(dy[i, j]) - t) * inv
    return dx


def _adam_update_loops(p, g, m, v, t, lr, beta1, beta2, eps):
    n = p.shape[0]
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i in range(n):
        gi = float(g[i])
        m[i] = beta1 * float(m[i]) + (1.0 - beta1) * gi
        v[i] = beta2 * float(v[i]) + (1.0 - beta2) * gi * gi
        mhat = float(m[i]) / c1
        vhat = float(v[i]) / c2
        p[i] = float(p[i]) - lr * mhat / (math.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# backend binding

if _HAVE_NUMBA:
    _jit = numba.njit(cache=True)
    softmax_fwd_numba = _jit(_softmax_fwd_loops)
    softmax_bwd_numba = _jit(_softmax_bwd_loops)
    logistic_fwd_numba = _jit(_logistic_fwd_loops)
    gelu_fwd_numba = _jit(_gelu_fwd_loops)
    gelu_bwd_numba = _jit(_gelu_bwd_loops)
    layernorm_fwd_numba = _jit(_layernorm_fwd_loops)
    layernorm_bwd_numba = _jit(_layernorm_bwd_loops)
    normrows_fwd_numba = _jit(_normrows_fwd_loops)
    normrows_bwd_numba = _jit(_normrows_bwd_loops)
    adam_update_numba = _jit(_adam_update_loops)
else:
    softmax_fwd_numba = None
    softmax_bwd_numba = None
    logistic_fwd_numba = None
    gelu_fwd_numba = None
    gelu_bwd_numba = None
    layernorm_fwd_numba = None
    layernorm_bwd_numba = None
    normrows_fwd_numba = None
    normrows_bwd_numba = None
    adam_update_numba = None

if USE_NUMBA:
    softmax_fwd = softmax_fwd_numba
    softmax_bwd = softmax_bwd_numba
    logistic_fwd = logistic_fwd_numba
    gelu_fwd = gelu_fwd_numba
    gelu_bwd = gelu_bwd_numba
    layernorm_fwd = layernorm_fwd_numba
    layernorm_bwd = layernorm_bwd_numba
    normrows_fwd = normrows_fwd_numba
    normrows_bwd = normrows_bwd_numba
    adam_update = adam_update_numba
else:
    softmax_fwd = softmax_fwd_numpy
    softmax_bwd = softmax_bwd_numpy
    logistic_fwd = logistic_fwd_numpy
    gelu_fwd = gelu_fwd_numpy
    gelu_bwd = gelu_bwd_numpy
    layernorm_fwd = layernorm_fwd_numpy
    layernorm_bwd = layernorm_bwd_numpy
    normrows_fwd = normrows_fwd_numpy
    normrows_bwd = normrows_bwd_numpy
    adam_update = adam_update_numpy

IMPLEMENTATIONS = {
    "softmax_fwd": {"numpy": softmax_fwd_numpy, "numba": softmax_fwd_numba},
    "softmax_bwd": {"numpy": softmax_bwd_numpy, "numba": softmax_bwd_numba},
    "logistic_fwd": {"numpy": logistic_fwd_numpy, "numba": logistic_fwd_numba},
    "gelu_fwd": {"numpy": gelu_fwd_numpy, "numba": gelu_fwd_numba},
    "gelu_bwd": {"numpy": gelu_bwd_numpy, "numba": gelu_bwd_numba},
    "layernorm_fwd": {"numpy": layernorm_fwd_numpy, "numba": layernorm_fwd_numba},
    "layernorm_bwd": {"numpy": layernorm_bwd_numpy, "numba": layernorm_bwd_numba},
    "normrows_fwd": {"numpy": normrows_fwd_numpy, "numba": normrows_fwd_numba},
    "normrows_bwd": {"numpy": normrows_bwd_numpy, "numba": normrows_bwd_numba},
    "adam_update": {"numpy": adam_update_numpy, "numba": adam_update_numba},
}
