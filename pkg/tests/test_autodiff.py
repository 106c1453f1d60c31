"""Tensor engine: forward semantics, backward semantics, gradient checks.

The convolution oracle here is a deliberately naive scalar triple loop; the
finite-difference helper is shared with the gradcheck module and never goes
through the reverse-mode path it is checking.
"""

import numpy as np
import pytest

from snapspec import autodiff as ad
from snapspec.autodiff import Tensor
from snapspec.errors import ShapeError, UsageError
from snapspec.gradcheck import numerical_gradient, rel_error

from conftest import away_from_kinks


def conv2d_oracle(x, w, b=None, stride=1, padding=0):
    """Scalar triple-loop convolution (cross-correlation), zero padded."""
    bs, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wid + 2 * padding - kw) // stride + 1
    out = np.zeros((bs, cout, ho, wo))
    for n in range(bs):
        for co in range(cout):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for ky in range(kh):
                            for kx in range(kw):
                                iy = oy * stride + ky - padding
                                ix = ox * stride + kx - padding
                                if 0 <= iy < h and 0 <= ix < wid:
                                    acc += x[n, ci, iy, ix] * w[co, ci, ky, kx]
                    out[n, co, oy, ox] = acc + (b[co] if b is not None else 0.0)
    return out


def check_op_gradient(build, arrays, h=1e-5, tol=1e-4):
    """Compare reverse-mode gradients of sum(op(..)**-ish scalar) against
    central differences for every input array."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    loss = ad.tsum(ad.mul(out, out))
    ad.backward(loss)

    def value():
        with ad.no_grad():
            o = build(*[Tensor(t.data) for t in tensors])
            return float(ad.tsum(ad.mul(o, o)).data)

    for t in tensors:
        idx = np.arange(t.data.size)
        fd = numerical_gradient(value, t.data, idx, h=h)
        assert rel_error(t.grad.reshape(-1), fd) <= tol


class TestForwardSemantics:
    def test_conv_zero_input(self, rng):
        x = Tensor(np.zeros((1, 1, 3, 3)))
        w = Tensor(rng.uniform(-1, 1, (1, 1, 3, 3)))
        out = ad.conv2d(x, w, Tensor(np.zeros(1)), padding=1)
        assert not out.data.any()

    def test_conv_identity_kernel(self, rng):
        x = rng.uniform(-1, 1, (1, 1, 3, 3))
        out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_conv_matches_triple_loop_oracle(self):
        # 2x2 input, all-ones 3x3 kernel, same padding: every output window
        # covers the whole input, so the oracle gives 10 everywhere.
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        w = np.ones((1, 1, 3, 3))
        expected = conv2d_oracle(x, w, padding=1)
        np.testing.assert_array_equal(expected, np.full((1, 1, 2, 2), 10.0))
        got = ad.conv2d(Tensor(x), Tensor(w), padding=1)
        np.testing.assert_allclose(got.data, expected, atol=1e-12)

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0), (2, 2)])
    def test_conv_random_against_oracle(self, rng, stride, padding):
        x = rng.uniform(-1, 1, (2, 3, 6, 5))
        w = rng.uniform(-1, 1, (4, 3, 3, 3))
        b = rng.uniform(-1, 1, 4)
        got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        np.testing.assert_allclose(got.data, conv2d_oracle(x, w, b, stride, padding), atol=1e-12)

    def test_conv_shape_formula(self, rng):
        out = ad.conv2d(Tensor(rng.normal(size=(1, 2, 9, 7))),
                        Tensor(rng.normal(size=(5, 2, 3, 3))), stride=2, padding=1)
        assert out.shape == (1, 5, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)

    def test_conv_channel_mismatch(self, rng):
        with pytest.raises(ShapeError, match="channels"):
            ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_conv_even_kernel_rejected(self):
        with pytest.raises(UsageError, match="odd"):
            ad.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))

    def test_relu_sign_cases(self):
        out = ad.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_relu_all_negative(self, rng):
        out = ad.relu(Tensor(-np.abs(rng.normal(size=(3, 4))) - 0.1))
        assert not out.data.any()

    def test_sigmoid_at_zero(self):
        assert float(ad.sigmoid(Tensor(np.zeros(1))).data[0]) == 0.5

    def test_sigmoid_symmetry(self, rng):
        x = rng.uniform(-6, 6, 64)
        s = ad.sigmoid(Tensor(x)).data
        s_neg = ad.sigmoid(Tensor(-x)).data
        np.testing.assert_allclose(s, 1.0 - s_neg, atol=1e-15)
        assert ((s > 0) & (s < 1)).all()

    def test_gap_constant_channel(self):
        x = np.full((1, 3, 4, 4), 0.0)
        x[0, 1] = 2.5
        out = ad.global_avg_pool(Tensor(x))
        np.testing.assert_allclose(out.data[0, :, 0, 0], [0.0, 2.5, 0.0])

    def test_gap_hand_sum(self):
        x = np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2)
        assert ad.global_avg_pool(Tensor(x)).data[0, 0, 0, 0] == 4.0

    def test_upsample_nearest_definition(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        out = ad.upsample_nearest(Tensor(x))
        expected = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=float)
        np.testing.assert_array_equal(out.data[0, 0], expected)

    def test_down_up_roundtrip_shape(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 8, 8)))
        wd = Tensor(rng.normal(size=(2, 2, 3, 3)))
        wu = Tensor(rng.normal(size=(2, 2, 3, 3)))
        down = ad.downsample_block(x, wd)
        assert down.shape == (1, 2, 4, 4)
        up = ad.upsample_block(down, wu)
        assert up.shape == (1, 2, 8, 8)

    def test_downsample_odd_extent_rejected(self, rng):
        with pytest.raises(ShapeError, match="divisible"):
            ad.downsample_block(Tensor(np.zeros((1, 1, 5, 8))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_concat_shape_arithmetic(self, rng):
        a = Tensor(rng.normal(size=(1, 2, 4, 4)))
        b = Tensor(rng.normal(size=(1, 3, 4, 4)))
        out = ad.concat([a, b], axis=1)
        assert out.shape == (1, 5, 4, 4)
        np.testing.assert_array_equal(out.data[:, :2], a.data)
        np.testing.assert_array_equal(out.data[:, 2:], b.data)

    def test_concat_incompatible(self, rng):
        with pytest.raises(ShapeError):
            ad.concat([Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 5, 4)))], axis=1)

    def test_mul_by_ones_identity(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        out = ad.mul(Tensor(x), Tensor(np.ones((1, 3, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_add_incompatible_broadcast(self):
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


class TestBackwardSemantics:
    def test_sum_gradient_all_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        ad.backward(ad.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 5)))

    def test_quadratic_gradient_is_x(self, rng):
        x = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        ad.backward(0.5 * ad.tsum(ad.mul(x, x)))
        np.testing.assert_allclose(x.grad, x.data, atol=1e-15)

    def test_non_scalar_loss_rejected(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        with pytest.raises(UsageError, match="scalar"):
            ad.backward(ad.relu(x))

    def test_backward_twice_rezeroes(self, rng):
        x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        loss = ad.tsum(ad.mul(x, x))
        ad.backward(loss)
        first = x.grad.copy()
        ad.backward(loss)
        np.testing.assert_array_equal(x.grad, first)

    def test_shared_subexpression_accumulates(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        y = ad.relu(x)
        ad.backward(ad.tsum(y + y))
        np.testing.assert_allclose(x.grad, 2.0 * (x.data > 0), atol=1e-15)

    def test_linearity_of_backward(self, rng):
        xv = away_from_kinks(rng.uniform(-1, 1, (4, 4)))
        a, bcoef = 1.7, -0.6

        def grad_of(fn):
            x = Tensor(xv, requires_grad=True)
            ad.backward(fn(x))
            return x.grad

        gf = grad_of(lambda x: ad.tsum(ad.relu(x)))
        gg = grad_of(lambda x: ad.tsum(ad.mul(x, x)))
        combined = grad_of(lambda x: a * ad.tsum(ad.relu(x)) + bcoef * ad.tsum(ad.mul(x, x)))
        np.testing.assert_allclose(combined, a * gf + bcoef * gg, rtol=1e-12)

    def test_relu_gradient_example(self):
        x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
        ad.backward(ad.tsum(ad.relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_sigmoid_gradient_at_zero(self):
        x = Tensor(np.zeros(1), requires_grad=True)
        ad.backward(ad.tsum(ad.sigmoid(x)))
        np.testing.assert_allclose(x.grad, [0.25], atol=1e-15)

    def test_gap_distributes_uniformly(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
        ad.backward(ad.tsum(ad.global_avg_pool(x)))
        np.testing.assert_allclose(x.grad, np.full_like(x.data, 1.0 / 16.0), atol=1e-15)

    def test_broadcast_mul_gradient_on_factor(self, rng):
        x = rng.uniform(-1, 1, (2, 3, 4, 4))
        f = Tensor(rng.uniform(0.5, 1.5, (1, 3, 1, 1)), requires_grad=True)
        xt = Tensor(x, requires_grad=True)
        up = rng.uniform(-1, 1, (2, 3, 4, 4))
        ad.backward(ad.tsum(ad.mul(ad.mul(xt, f), Tensor(up))))
        expected = (up * x).sum(axis=(0, 2, 3)).reshape(1, 3, 1, 1)
        np.testing.assert_allclose(f.grad, expected, rtol=1e-12)

    def test_zero_input_biasfree_conv_zero_grads(self, rng):
        x = Tensor(np.zeros((1, 2, 4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        out = ad.conv2d(x, w, padding=1)
        assert not out.data.any()
        ad.backward(ad.tsum(ad.mul(out, out)))
        assert not w.grad.any()

    def test_determinism_bit_identical(self, rng):
        def run():
            r = np.random.default_rng(7)
            x = Tensor(r.normal(size=(1, 2, 8, 8)), requires_grad=True)
            w = Tensor(r.normal(size=(2, 2, 3, 3)), requires_grad=True)
            out = ad.relu(ad.conv2d(x, w, padding=1))
            loss = ad.tsum(ad.mul(out, out))
            ad.backward(loss)
            return loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

        assert run() == run()

    def test_finiteness_after_deep_chain(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
        t = x
        for _ in range(300):  # deeper than the default recursion limit
            t = ad.relu(t + Tensor(np.full((1, 2, 4, 4), 0.01)))
        loss = ad.tsum(t)
        ad.backward(loss)
        assert np.isfinite(loss.data).all() and np.isfinite(x.grad).all()


class TestGradientChecks:
    """Central finite differences (h=1e-5) vs reverse mode, 64-bit."""

    def test_conv2d(self, rng):
        for _ in range(5):
            x = away_from_kinks(rng.uniform(-1, 1, (1, 2, 5, 5)))
            w = rng.uniform(-1, 1, (3, 2, 3, 3))
            b = rng.uniform(-1, 1, 3)
            check_op_gradient(lambda xt, wt, bt: ad.conv2d(xt, wt, bt, padding=1), [x, w, b])

    def test_conv2d_strided(self, rng):
        x = rng.uniform(-1, 1, (1, 2, 6, 6))
        w = rng.uniform(-1, 1, (2, 2, 3, 3))
        check_op_gradient(lambda xt, wt: ad.conv2d(xt, wt, stride=2, padding=1), [x, w])

    def test_relu(self, rng):
        x = away_from_kinks(rng.uniform(-1, 1, (4, 5)))
        check_op_gradient(lambda t: ad.relu(t), [x])

    def test_sigmoid(self, rng):
        check_op_gradient(lambda t: ad.sigmoid(t), [rng.uniform(-1, 1, (4, 5))])

    def test_gap(self, rng):
        check_op_gradient(lambda t: ad.global_avg_pool(t), [rng.uniform(-1, 1, (1, 3, 4, 4))])

    def test_down_and_up_blocks(self, rng):
        x = rng.uniform(-1, 1, (1, 2, 4, 4))
        wd = rng.uniform(-1, 1, (2, 2, 3, 3))
        check_op_gradient(lambda xt, wt: ad.downsample_block(xt, wt), [x, wd])
        check_op_gradient(lambda xt, wt: ad.upsample_block(xt, wt), [x, wd])

    def test_concat_and_broadcast_mul(self, rng):
        a = rng.uniform(-1, 1, (1, 2, 3, 3))
        b = rng.uniform(-1, 1, (1, 1, 3, 3))
        f = rng.uniform(0.2, 1.0, (1, 3, 1, 1))
        check_op_gradient(lambda at, bt, ft: ad.mul(ad.concat([at, bt], axis=1), ft), [a, b, f])

    def test_composite_conv_relu_gap(self, rng):
        x = rng.uniform(-1, 1, (1, 2, 6, 6))
        w = rng.uniform(-1, 1, (3, 2, 3, 3))
        b = rng.uniform(-1, 1, 3)

        def net(xt, wt, bt):
            return ad.global_avg_pool(ad.relu(ad.conv2d(xt, wt, bt, padding=1)))

        check_op_gradient(net, [x, w, b])
