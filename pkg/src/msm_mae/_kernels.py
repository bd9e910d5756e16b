"""Row-wise numeric kernels used by the transformer forward/backward passes.

Every kernel exists twice: a numba ``@njit`` loop version and a vectorized
numpy version.  The numba path is used unless ``MSM_MAE_NUMBA`` is set to
``0`` (or numba is not importable).  Both paths take 2-D C-contiguous arrays
of shape ``(rows, features)`` and are tested against each other.

Matrix products are left to numpy/BLAS in both paths.
"""

import math
import os

import numpy as np
from scipy.special import erf as _erf

try:
    import numba as nb
except ImportError:  # pragma: no cover
    nb = None

HAS_NUMBA = nb is not None
USE_NUMBA = HAS_NUMBA and os.environ.get("MSM_MAE_NUMBA", "1").lower() not in ("0", "false", "no", "off")

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def layernorm_fwd_np(x, g, b, eps):
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    var = (xc * xc).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd[:, None]
    return xhat * g + b, mean, rstd


def layernorm_bwd_np(dy, x, mean, rstd, g):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = (dxhat - dxhat.mean(axis=1, keepdims=True)
          - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)) * rstd[:, None]
    return dx, dg, db


def softmax_fwd_np(s):
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd_np(a, da):
    return a * (da - (da * a).sum(axis=1, keepdims=True))


def gelu_fwd_np(x):
    return 0.5 * x * (1.0 + _erf(x * _SQRT1_2)).astype(x.dtype, copy=False)


def gelu_bwd_np(x, dy):
    cdf = 0.5 * (1.0 + _erf(x * _SQRT1_2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return (dy * (cdf + x * pdf)).astype(x.dtype, copy=False)


def adamw_update_np(p, g, m, v, lr, beta1, beta2, eps, wd, step):
    """In-place AdamW step; ``step`` is 1-based for bias correction."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    upd = (m / bc1) / (np.sqrt(v / bc2) + eps) + wd * p
    p -= (lr * upd).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAS_NUMBA:
    _jit = nb.njit(cache=True, nogil=True)

    @_jit
    def layernorm_fwd_nb(x, g, b, eps):
        rows, n = x.shape
        y = np.empty_like(x)
        mean = np.empty(rows, dtype=x.dtype)
        rstd = np.empty(rows, dtype=x.dtype)
        for r in range(rows):
            acc = 0.0
            for j in range(n):
                acc += x[r, j]
            mu = acc / n
            acc = 0.0
            for j in range(n):
                d = x[r, j] - mu
                acc += d * d
            rs = 1.0 / math.sqrt(acc / n + eps)
            mean[r] = mu
            rstd[r] = rs
            for j in range(n):
                y[r, j] = (x[r, j] - mu) * rs * g[j] + b[j]
        return y, mean, rstd

    @_jit
    def layernorm_bwd_nb(dy, x, mean, rstd, g):
        rows, n = x.shape
        dx = np.empty_like(x)
        dg = np.zeros(n, dtype=np.float64)
        db = np.zeros(n, dtype=np.float64)
        for r in range(rows):
            mu = mean[r]
            rs = rstd[r]
            s1 = 0.0
            s2 = 0.0
            for j in range(n):
                xh = (x[r, j] - mu) * rs
                dxh = dy[r, j] * g[j]
                s1 += dxh
                s2 += dxh * xh
                dg[j] += dy[r, j] * xh
                db[j] += dy[r, j]
            s1 /= n
            s2 /= n
            for j in range(n):
                xh = (x[r, j] - mu) * rs
                dx[r, j] = (dy[r, j] * g[j] - s1 - xh * s2) * rs
        return dx, dg.astype(x.dtype), db.astype(x.dtype)

    @_jit
    def softmax_fwd_nb(s):
        rows, n = s.shape
        out = np.empty_like(s)
        for r in range(rows):
            mx = s[r, 0]
            for j in range(1, n):
                if s[r, j] > mx:
                    mx = s[r, j]
            tot = 0.0
            for j in range(n):
                e = math.exp(s[r, j] - mx)
                out[r, j] = e
                tot += e
            inv = 1.0 / tot
            for j in range(n):
                out[r, j] *= inv
        return out

    @_jit
    def softmax_bwd_nb(a, da):
        rows, n = a.shape
        out = np.empty_like(a)
        for r in range(rows):
            dot = 0.0
            for j in range(n):
                dot += da[r, j] * a[r, j]
            for j in range(n):
                out[r, j] = a[r, j] * (da[r, j] - dot)
        return out

    @_jit
    def gelu_fwd_nb(x):
        rows, n = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            for j in range(n):
                v = x[r, j]
                out[r, j] = 0.5 * v * (1.0 + math.erf(v * _SQRT1_2))
        return out

    @_jit
    def gelu_bwd_nb(x, dy):
        rows, n = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            for j in range(n):
                v = x[r, j]
                cdf = 0.5 * (1.0 + math.erf(v * _SQRT1_2))
                pdf = math.exp(-0.5 * v * v) * _INV_SQRT_2PI
                out[r, j] = dy[r, j] * (cdf + v * pdf)
        return out

    @_jit
    def _adamw_flat(p, g, m, v, lr, beta1, beta2, eps, wd, step):
        bc1 = 1.0 - beta1 ** step
        bc2 = 1.0 - beta2 ** step
        for i in range(p.size):
            gi = g[i]
            mi = beta1 * m[i] + (1.0 - beta1) * gi
            vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
            m[i] = mi
            v[i] = vi
            upd = (mi / bc1) / (math.sqrt(vi / bc2) + eps) + wd * p[i]
            p[i] -= lr * upd

    def adamw_update_nb(p, g, m, v, lr, beta1, beta2, eps, wd, step):
        _adamw_flat(p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
                    float(lr), float(beta1), float(beta2), float(eps), float(wd), float(step))


def _pick(name):
    if USE_NUMBA:
        return globals()[name + "_nb"]
    return globals()[name + "_np"]


layernorm_fwd = _pick("layernorm_fwd")
layernorm_bwd = _pick("layernorm_bwd")
softmax_fwd = _pick("softmax_fwd")
softmax_bwd = _pick("softmax_bwd")
gelu_fwd = _pick("gelu_fwd")
gelu_bwd = _pick("gelu_bwd")
adamw_update = _pick("adamw_update")


def backend():
    """Name of the active kernel backend."""
    return "numba" if USE_NUMBA else "numpy"
