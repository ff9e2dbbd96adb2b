"""Row-wise numeric kernels used by the autodiff engine.

Every kernel operates on a C-contiguous 2-D array whose last axis is the
reduction axis. Two implementations exist: numba ``@njit`` loops and a pure
numpy path. The numba path is used when numba imports and the environment
variable ``LARSLAB_NUMBA`` is not ``"0"``.

Both implementations are importable directly (``NUMPY`` / ``NUMBA``) so the
benchmark and the parity tests can run them side by side.
"""

from __future__ import annotations

import math
import os
from types import SimpleNamespace

import numpy as np
from scipy.special import erf as _erf

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# --------------------------------------------------------------------------
# numpy path
# --------------------------------------------------------------------------

def _np_gelu_forward(x):
    return (0.5 * x * (1.0 + _erf(x * _SQRT1_2))).astype(x.dtype, copy=False)


def _np_gelu_backward(x, g):
    cdf = 0.5 * (1.0 + _erf(x * _SQRT1_2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return (g * (cdf + x * pdf)).astype(x.dtype, copy=False)


def _np_softmax_forward(x):
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def _np_softmax_backward(y, g):
    return y * (g - np.sum(g * y, axis=-1, keepdims=True))


def _np_layer_norm_forward(x, eps):
    mean = np.mean(x, axis=-1)
    var = np.mean((x - mean[:, None]) ** 2, axis=-1)
    y = (x - mean[:, None]) / np.sqrt(var[:, None] + eps)
    return y.astype(x.dtype, copy=False), mean, var


def _np_layer_norm_backward(x, mean, var, g, eps):
    n = x.shape[-1]
    rstd = 1.0 / np.sqrt(var[:, None] + eps)
    xhat = (x - mean[:, None]) * rstd
    g_sum = np.sum(g, axis=-1, keepdims=True)
    gx_sum = np.sum(g * xhat, axis=-1, keepdims=True)
    return (rstd * (g - g_sum / n - xhat * gx_sum / n)).astype(x.dtype, copy=False)


NUMPY = SimpleNamespace(
    name="numpy",
    gelu_forward=_np_gelu_forward,
    gelu_backward=_np_gelu_backward,
    softmax_forward=_np_softmax_forward,
    softmax_backward=_np_softmax_backward,
    layer_norm_forward=_np_layer_norm_forward,
    layer_norm_backward=_np_layer_norm_backward,
)


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

def _build_numba():
    import numba as nb

    njit = nb.njit(cache=True, nogil=True)

    @njit
    def gelu_forward(x):
        out = np.empty_like(x)
        flat = x.reshape(x.size)
        res = out.reshape(out.size)
        for i in range(flat.size):
            v = flat[i]
            res[i] = 0.5 * v * (1.0 + math.erf(v * _SQRT1_2))
        return out

    @njit
    def gelu_backward(x, g):
        out = np.empty_like(x)
        flat = x.reshape(x.size)
        gf = g.reshape(g.size)
        res = out.reshape(out.size)
        for i in range(flat.size):
            v = flat[i]
            cdf = 0.5 * (1.0 + math.erf(v * _SQRT1_2))
            pdf = math.exp(-0.5 * v * v) * _INV_SQRT_2PI
            res[i] = gf[i] * (cdf + v * pdf)
        return out

    @njit
    def softmax_forward(x):
        rows, n = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            m = x[r, 0]
            for j in range(1, n):
                if x[r, j] > m:
                    m = x[r, j]
            s = 0.0
            for j in range(n):
                e = math.exp(x[r, j] - m)
                out[r, j] = e
                s += e
            inv = 1.0 / s
            for j in range(n):
                out[r, j] = out[r, j] * inv
        return out

    @njit
    def softmax_backward(y, g):
        rows, n = y.shape
        out = np.empty_like(y)
        for r in range(rows):
            dot = 0.0
            for j in range(n):
                dot += g[r, j] * y[r, j]
            for j in range(n):
                out[r, j] = y[r, j] * (g[r, j] - dot)
        return out

    @njit
    def layer_norm_forward(x, eps):
        rows, n = x.shape
        out = np.empty_like(x)
        mean = np.empty(rows, dtype=x.dtype)
        var = np.empty(rows, dtype=x.dtype)
        for r in range(rows):
            s = 0.0
            for j in range(n):
                s += x[r, j]
            mu = s / n
            ss = 0.0
            for j in range(n):
                d = x[r, j] - mu
                ss += d * d
            v = ss / n
            mean[r] = mu
            var[r] = v
            rstd = 1.0 / math.sqrt(v + eps)
            for j in range(n):
                out[r, j] = (x[r, j] - mu) * rstd
        return out, mean, var

    @njit
    def layer_norm_backward(x, mean, var, g, eps):
        rows, n = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            rstd = 1.0 / math.sqrt(var[r] + eps)
            g_sum = 0.0
            gx_sum = 0.0
            for j in range(n):
                xhat = (x[r, j] - mean[r]) * rstd
                g_sum += g[r, j]
                gx_sum += g[r, j] * xhat
            for j in range(n):
                xhat = (x[r, j] - mean[r]) * rstd
                out[r, j] = rstd * (g[r, j] - g_sum / n - xhat * gx_sum / n)
        return out

    return SimpleNamespace(
        name="numba",
        gelu_forward=gelu_forward,
        gelu_backward=gelu_backward,
        softmax_forward=softmax_forward,
        softmax_backward=softmax_backward,
        layer_norm_forward=layer_norm_forward,
        layer_norm_backward=layer_norm_backward,
    )


try:
    NUMBA = _build_numba()
except ImportError:  # numba is an optional extra
    NUMBA = None


def _select():
    if os.environ.get("LARSLAB_NUMBA", "1") == "0" or NUMBA is None:
        return NUMPY
    return NUMBA


ACTIVE = _select()


def backend_name() -> str:
    return ACTIVE.name


def gelu_forward(x: np.ndarray) -> np.ndarray:
    return ACTIVE.gelu_forward(x)


def gelu_backward(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return ACTIVE.gelu_backward(x, g)


def softmax_forward(x: np.ndarray) -> np.ndarray:
    return ACTIVE.softmax_forward(x)


def softmax_backward(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return ACTIVE.softmax_backward(y, g)


def layer_norm_forward(x: np.ndarray, eps: float):
    """Normalize rows of ``x``; returns ``(y, mean, var)``."""
    return ACTIVE.layer_norm_forward(x, eps)


def layer_norm_backward(x, mean, var, g, eps):
    return ACTIVE.layer_norm_backward(x, mean, var, g, eps)
