"""MLP forward/backward, softmax, and Adam against hand oracles."""

import numpy as np
import pytest

from farflux import numerics
from farflux.errors import NumericError, ShapeError


def test_zero_network_maps_to_zero():
    mlp = numerics.Mlp([np.zeros((3, 2)), np.zeros((1, 3))],
                       [np.zeros(3), np.zeros(1)])
    assert np.array_equal(numerics.mlp_forward(mlp, [1.5, -2.0]), [0.0])


def test_single_affine_layer():
    mlp = numerics.Mlp([np.array([[2.0]])], [np.array([1.0])])
    assert numerics.mlp_forward(mlp, [3.0]) == pytest.approx(7.0)


def test_two_layer_hand_computation():
    # pre1 = [1*1 - 1*2 + 0, 0.5*1 + 2*2 - 1] = [-1, 3.5]; relu -> [0, 3.5]
    # out  = 0 + 3.5 + 0.5 = 4.0
    mlp = numerics.Mlp([np.array([[1.0, -1.0], [0.5, 2.0]]),
                        np.array([[1.0, 1.0]])],
                       [np.array([0.0, -1.0]), np.array([0.5])])
    assert numerics.mlp_forward(mlp, [1.0, 2.0]) == pytest.approx(4.0)


def test_dimension_mismatch_raises():
    mlp = numerics.Mlp([np.zeros((2, 3))], [np.zeros(2)])
    with pytest.raises(ShapeError):
        numerics.mlp_forward(mlp, [1.0, 2.0])


def test_chained_dims_validate():
    bad = numerics.Mlp([np.zeros((4, 3)), np.zeros((1, 5))],
                       [np.zeros(4), np.zeros(1)])
    with pytest.raises(ShapeError):
        bad.validate()


def test_linear_layer_gradient_is_outer_product():
    rng = np.random.default_rng(0)
    mlp = numerics.Mlp([rng.normal(size=(2, 3))], [np.zeros(2)])
    x = rng.normal(size=(5, 3))
    up = np.ones((5, 2))
    grads, dx = numerics.mlp_gradients(mlp, x, up)
    expected = np.zeros((2, 3))
    for i in range(5):
        expected += np.outer(up[i], x[i])
    np.testing.assert_allclose(grads[0][0], expected, rtol=1e-12)
    np.testing.assert_allclose(dx, up @ mlp.weights[0], rtol=1e-12)


def _loss(mlp, x, up):
    return float((numerics.mlp_forward_batch(mlp, x) * up).sum())


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    width = int(rng.integers(2, 17))
    depth = int(rng.integers(1, 4))
    d_in = int(rng.integers(2, 6))
    dims = (d_in,) + (width,) * depth + (2,)
    mlp = numerics.init_mlp(dims, rng)
    x = rng.normal(size=(3, d_in))
    up = rng.normal(size=(3, 2))
    grads, _ = numerics.mlp_gradients(mlp, x, up)
    h = 1e-5
    for k, w in enumerate(mlp.weights):
        flat = w.ravel()
        for j in range(0, flat.size, max(1, flat.size // 10)):
            orig = flat[j]
            flat[j] = orig + h
            lp = _loss(mlp, x, up)
            flat[j] = orig - h
            lm = _loss(mlp, x, up)
            flat[j] = orig
            fd = (lp - lm) / (2 * h)
            an = grads[k][0].ravel()[j]
            assert abs(an - fd) <= 1e-4 * max(abs(an), abs(fd), 1e-8)


def test_relu_subgradient_at_zero_is_zero():
    # first layer lands exactly on 0 pre-activation
    mlp = numerics.Mlp([np.array([[1.0]]), np.array([[1.0]])],
                       [np.array([-1.0]), np.array([0.0])])
    grads, dx = numerics.mlp_gradients(mlp, np.array([[1.0]]),
                                       np.array([[1.0]]))
    assert grads[0][0][0, 0] == 0.0
    assert grads[0][1][0] == 0.0
    assert dx[0, 0] == 0.0


def test_nonfinite_upstream_rejected():
    mlp = numerics.init_mlp((2, 2), np.random.default_rng(0))
    with pytest.raises(NumericError):
        numerics.mlp_gradients(mlp, np.zeros((1, 2)),
                               np.array([[np.nan, 1.0]]))


def test_workspace_paths_match_plain_paths():
    rng = np.random.default_rng(3)
    mlp = numerics.init_mlp((4, 8, 8, 2), rng)
    x = rng.normal(size=(16, 4))
    ws = numerics.MlpWorkspace(mlp.dims, 16)
    ws.load(mlp)
    plain, acts_plain = numerics.mlp_forward_batch(mlp, x,
                                                   keep_activations=True)
    fast, acts_fast = numerics.forward_into(mlp, x, ws,
                                            keep_activations=True)
    np.testing.assert_array_equal(plain, fast)
    up = rng.normal(size=(16, 2))
    g_plain, dx_plain = numerics._backward_from_acts(mlp, acts_plain,
                                                     up.copy())
    g_fast, dx_fast = numerics.backward_into(mlp, acts_fast, up.copy(), ws)
    np.testing.assert_array_equal(dx_plain, dx_fast)
    for (wp, bp), (wf, bf) in zip(g_plain, g_fast):
        np.testing.assert_array_equal(wp, wf)
        np.testing.assert_array_equal(bp, bf)


class TestSoftmax2d:
    def test_uniform_on_equal_logits(self):
        out = numerics.softmax_2d(np.full((128, 128), 3.7))
        np.testing.assert_allclose(out, 1.0 / 16384, rtol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(6, 7))
        np.testing.assert_allclose(numerics.softmax_2d(z),
                                   numerics.softmax_2d(z + 123.456),
                                   rtol=1e-12)

    def test_hand_case(self):
        out = numerics.softmax_2d(np.array([[0.0, np.log(2.0)],
                                            [0.0, 0.0]]))
        np.testing.assert_allclose(out, [[0.2, 0.4], [0.2, 0.2]],
                                   rtol=1e-12)

    def test_sums_to_one_at_extreme_magnitudes(self):
        rng = np.random.default_rng(2)
        for scale in (1.0, 1e4, -1e4):
            z = rng.normal(size=(16, 16)) + scale
            z[0, 0] = scale
            out = numerics.softmax_2d(z)
            assert abs(out.sum() - 1.0) < 1e-9
            assert (out >= 0).all()

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericError):
            numerics.softmax_2d(np.array([[np.inf, 0.0]]))


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = [np.array([1.0, -2.0])]
        st = numerics.adam_init(p, lr=0.1)
        st.m[0][:] = 1.0
        st.v[0][:] = 1.0
        numerics.adam_step(p, [np.zeros(2)], st)
        np.testing.assert_array_equal(p[0], [1.0, -2.0])
        assert (st.m[0] < 1.0).all() and (st.v[0] < 1.0).all()

    def test_first_step_is_signed_lr(self):
        p = [np.array([0.0, 0.0])]
        st = numerics.adam_init(p, lr=0.1)
        numerics.adam_step(p, [np.array([3.0, -0.5])], st)
        np.testing.assert_allclose(p[0], [-0.1, 0.1], rtol=1e-6)

    def test_quadratic_descent_matches_scalar_recurrence(self):
        p = [np.array([1.0])]
        st = numerics.adam_init(p, lr=0.1)
        # independent scalar re-derivation of the same recurrence
        x, m, v = 1.0, 0.0, 0.0
        seen = []
        for t in range(1, 4):
            g = 2.0 * x
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1 - 0.9 ** t)
            vh = v / (1 - 0.999 ** t)
            x = x - 0.1 * mh / (np.sqrt(vh) + 1e-8)
            seen.append(x)
            numerics.adam_step(p, [np.array([2.0 * p[0][0]])], st)
            assert p[0][0] == pytest.approx(x, rel=1e-12)
        assert seen[0] > seen[1] > seen[2] > 0 - 0.5
        assert seen[2] < seen[0] < 1.0

    def test_nonfinite_gradient_aborts(self):
        p = [np.array([1.0])]
        st = numerics.adam_init(p)
        with pytest.raises(NumericError):
            numerics.adam_step(p, [np.array([np.nan])], st)
        assert p[0][0] == 1.0
        assert st.step == 0
