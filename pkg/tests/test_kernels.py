"""Backend parity: every kernel must agree between numpy and numba."""

import numpy as np
import pytest

from farflux import kernels
from farflux.errors import ConfigError

HAVE_NUMBA = "numba" in kernels.available_backends()

needs_both = pytest.mark.skipif(not HAVE_NUMBA,
                                reason="numba backend unavailable")


@pytest.fixture
def restore_backend():
    before = kernels.active_backend()
    yield
    kernels.use_backend(before)


def _both(fn):
    out = {}
    for name in kernels.available_backends():
        kernels.use_backend(name)
        out[name] = fn()
    return out


def test_unknown_backend_rejected():
    with pytest.raises(ConfigError):
        kernels.use_backend("tpu")


@needs_both
def test_dense_forward_parity(restore_backend):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(37, 11))
    wt = rng.normal(size=(11, 8))
    b = rng.normal(size=8)
    res = _both(lambda: kernels.dense_forward(x, wt, b, True))
    np.testing.assert_allclose(res["numpy"], res["numba"], rtol=1e-13)
    res = _both(lambda: kernels.dense_forward(x, wt, b, False))
    np.testing.assert_allclose(res["numpy"], res["numba"], rtol=1e-13)


@needs_both
def test_softmax_entropy_backward_parity(restore_backend):
    rng = np.random.default_rng(1)
    z = rng.normal(size=(5, 64)) * 50
    dp = rng.normal(size=(5, 64))
    res = _both(lambda: kernels.softmax_rows(z))
    np.testing.assert_allclose(res["numpy"], res["numba"], rtol=1e-12)
    p = res["numpy"]
    res = _both(lambda: kernels.entropy_rows(p))
    np.testing.assert_allclose(res["numpy"], res["numba"], rtol=1e-12)
    res = _both(lambda: kernels.softmax_backward(p, dp))
    np.testing.assert_allclose(res["numpy"], res["numba"],
                               rtol=1e-12, atol=1e-15)


@needs_both
def test_relu_backward_parity(restore_backend):
    rng = np.random.default_rng(2)
    a = np.maximum(rng.normal(size=(9, 6)), 0.0)
    da = rng.normal(size=(9, 6))
    res = _both(lambda: kernels.relu_backward(da.copy(), a))
    np.testing.assert_array_equal(res["numpy"], res["numba"])


@needs_both
def test_rotate_parity(restore_backend):
    rng = np.random.default_rng(3)
    img = rng.normal(size=(16, 16, 3))
    for angle in (0.0, 33.3, 90.0, 215.0):
        res = _both(lambda: kernels.rotate_bilinear(img, angle))
        np.testing.assert_allclose(res["numpy"], res["numba"], rtol=1e-12)
    stack = rng.normal(size=(4, 8, 8, 2))
    angles = np.array([0.0, 45.0, 180.0, 300.0])
    res = _both(lambda: kernels.rotate_batch(stack, angles))
    np.testing.assert_allclose(res["numpy"], res["numba"], rtol=1e-12)


def test_rotate_zero_angle_is_identity():
    rng = np.random.default_rng(4)
    img = rng.normal(size=(7, 7, 2))
    np.testing.assert_array_equal(kernels.rotate_bilinear(img, 0.0), img)


def test_rotate_edge_clamp_stays_in_range():
    img = np.arange(25, dtype=np.float64).reshape(5, 5, 1)
    out = kernels.rotate_bilinear(img, 雑 := 37.0)
    assert out.min() >= img.min() and out.max() <= img.max()


@needs_both
def test_forward_fill_parity(restore_backend):
    rng = np.random.default_rng(5)
    frames = rng.normal(size=(4, 6, 6, 2)).astype(np.float32)
    valid = rng.uniform(size=(4, 6, 6)) > 0.4
    res = _both(lambda: kernels.forward_fill(frames.copy(),
                                             np.ascontiguousarray(valid)))
    np.testing.assert_array_equal(res["numpy"], res["numba"])


@needs_both
def test_plume_parity(restore_backend):
    res = _both(lambda: kernels.plume_grid(17, 17, 30.0, 8, 8, 123.0,
                                           200.0, 100.0, 60.0))
    np.testing.assert_allclose(res["numpy"], res["numba"], rtol=1e-13)
    rng = np.random.default_rng(6)
    wds = rng.uniform(0, 360, 10)
    peaks = rng.uniform(50, 400, 10)
    tmap = (rng.uniform(size=(17, 17)) > 0.5).astype(np.int8)
    res = _both(lambda: kernels.plume_type_masses(
        wds, peaks, 0.5 * peaks, 0.3 * peaks, tmap, 2, 30.0, 8, 8))
    np.testing.assert_allclose(res["numpy"], res["numba"], rtol=1e-12)
    assert np.allclose(res["numpy"].sum(axis=1), 1.0)


@needs_both
def test_adam_update_parity(restore_backend):
    rng = np.random.default_rng(7)
    state = {}
    for name in kernels.available_backends():
        kernels.use_backend(name)
        p = rng.normal(size=50).copy()
        g = np.linspace(-1, 1, 50)
        m = np.zeros(50)
        v = np.zeros(50)
        p0 = p.copy()
        kernels.adam_update(p0, g, m, v, 1, 1e-3, 0.9, 0.999, 1e-8)
        state[name] = p0
    np.testing.assert_allclose(state["numpy"], state["numba"], rtol=1e-13)
