import os
import subprocess
import sys

import numpy as np
import pytest

from larslab import kernels as K

numba_only = pytest.mark.skipif(K.NUMBA is None, reason="numba not installed")


def _rows(dtype, seed=0, shape=(7, 13)):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)


@numba_only
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
def test_gelu_parity(dtype, tol):
    x, g = _rows(dtype, 0), _rows(dtype, 1)
    np.testing.assert_allclose(K.NUMBA.gelu_forward(x), K.NUMPY.gelu_forward(x), rtol=tol, atol=tol)
    np.testing.assert_allclose(K.NUMBA.gelu_backward(x, g), K.NUMPY.gelu_backward(x, g),
                               rtol=tol, atol=tol)


@numba_only
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-6)])
def test_softmax_parity_with_masked_entries(dtype, tol):
    x = _rows(dtype)
    x[np.triu_indices(7, 1)] = -np.inf
    g = _rows(dtype, 2)
    y_nb, y_np = K.NUMBA.softmax_forward(x), K.NUMPY.softmax_forward(x)
    np.testing.assert_allclose(y_nb, y_np, rtol=tol, atol=tol)
    assert np.all(y_nb[np.isinf(x)] == 0)
    np.testing.assert_allclose(K.NUMBA.softmax_backward(y_np, g), K.NUMPY.softmax_backward(y_np, g),
                               rtol=tol, atol=tol)


@numba_only
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-10), (np.float32, 1e-4)])
def test_layer_norm_parity(dtype, tol):
    x, g = _rows(dtype), _rows(dtype, 3)
    y1, m1, v1 = K.NUMBA.layer_norm_forward(x, 1e-5)
    y2, m2, v2 = K.NUMPY.layer_norm_forward(x, 1e-5)
    for a, b in ((y1, y2), (m1, m2), (v1, v2)):
        np.testing.assert_allclose(a, b, rtol=tol, atol=tol)
    np.testing.assert_allclose(K.NUMBA.layer_norm_backward(x, m2, v2, g, 1e-5),
                               K.NUMPY.layer_norm_backward(x, m2, v2, g, 1e-5), rtol=tol, atol=tol)


@pytest.mark.parametrize("impl", ["NUMPY", "NUMBA"])
def test_kernels_keep_dtype(impl):
    ns = getattr(K, impl)
    if ns is None:
        pytest.skip("numba not installed")
    x = _rows(np.float32)
    assert ns.gelu_forward(x).dtype == np.float32
    assert ns.softmax_forward(x).dtype == np.float32
    assert ns.layer_norm_forward(x, 1e-5)[0].dtype == np.float32


def test_layer_norm_rows_are_standardised():
    y, _, _ = K.layer_norm_forward(_rows(np.float64, shape=(4, 50)), 0.0)
    np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), 1, atol=1e-12)


def test_env_flag_selects_numpy():
    env = dict(os.environ, LARSLAB_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", "from larslab import kernels; print(kernels.backend_name())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
