import numpy as np
import pytest

from hsiadv import autodiff as ad
from hsiadv.errors import GraphError, ShapeError

from conftest import gradcheck, rel_err


class TestForwardValues:
    def test_channel_variance_constant_channel_is_zero(self):
        x = ad.Tensor(np.full((3, 8), 0.7))
        v = ad.channel_variance(x)
        assert np.all(v.data == 0.0)

    def test_channel_variance_hand_value(self):
        # population variance of [1,2,3,4]: mean 2.5, sum sq dev 5, /4 = 1.25
        v = ad.channel_variance(ad.Tensor([[1.0, 2.0, 3.0, 4.0]]))
        assert v.data.shape == (1,)
        assert abs(v.data[0] - 1.25) < 1e-12

    def test_conv2d_1x1_kernel_is_scaled_identity(self, rng):
        x = ad.Tensor(rng.normal(size=(2, 3, 5, 5)))
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c, 0, 0] = 2.0
        out = ad.conv2d(x, ad.Tensor(w))
        assert np.allclose(out.data, 2.0 * x.data)

    def test_softmax_ce_uniform_logits(self):
        logits = ad.Tensor(np.zeros((1, 4)))
        loss = ad.softmax_cross_entropy(logits, np.array([2]))
        assert abs(float(loss.data) - np.log(4.0)) < 1e-12

    def test_div_stable_requires_positive_o(self):
        a = ad.Tensor([1.0])
        with pytest.raises(ValueError):
            ad.div_stable(a, a, 0.0)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            ad.add(ad.Tensor([1.0, 2.0]), ad.Tensor([1.0, 2.0, 3.0]))
        with pytest.raises(ShapeError):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))

    def test_dtype_mismatch_raises(self):
        a = ad.Tensor(np.ones(3, dtype=np.float32))
        b = ad.Tensor(np.ones(3, dtype=np.float64))
        with pytest.raises(ShapeError):
            ad.mul(a, b)


class TestBackwardBasics:
    def test_sum_grad_is_ones(self):
        x = ad.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        ad.sum(x).backward()
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_sum_of_squares_grad(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        ad.sum(ad.square(x)).backward()
        assert np.allclose(x.grad, [2.0, 4.0])

    def test_backward_on_nonscalar_raises(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(GraphError):
            ad.square(x).backward()

    def test_accumulation_until_zeroed(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        ad.sum(ad.square(x)).backward()
        first = x.grad.copy()
        ad.sum(ad.square(x)).backward()
        assert np.allclose(x.grad, 2.0 * first)
        x.zero_grad()
        ad.sum(ad.square(x)).backward()
        assert np.allclose(x.grad, first)

    def test_zero_then_rerun_is_deterministic(self, rng):
        x = ad.Tensor(rng.normal(size=(4, 5)), requires_grad=True)

        def run():
            loss = ad.mean(ad.square(ad.relu(x)))
            loss.backward()
            g = x.grad.copy()
            x.zero_grad()
            return g

        assert np.array_equal(run(), run())

    def test_shared_node_accumulates(self):
        x = ad.Tensor([3.0], requires_grad=True)
        y = ad.mul(x, x)  # x used twice
        ad.sum(y).backward()
        assert np.allclose(x.grad, [6.0])

    def test_linearity_of_gradients(self, rng):
        x0 = rng.normal(size=(3, 4))
        a, b = 1.7, -0.6

        def grad_of(fn):
            x = ad.Tensor(x0, requires_grad=True)
            fn(x).backward()
            return x.grad

        f = lambda t: ad.sum(ad.square(t))
        g = lambda t: ad.mean(ad.mul(t, t))
        combo = lambda t: ad.add(ad.scalar_mul(f(t), a), ad.scalar_mul(g(t), b))
        expect = a * grad_of(f) + b * grad_of(g)
        assert rel_err(grad_of(combo), expect) < 1e-12


class TestFiniteDifferenceOracle:
    def test_fd_of_sum_is_ones(self, rng):
        x = ad.Tensor(rng.normal(size=(2, 3)))
        fd = ad.finite_diff_grad(ad.sum, x, step=1e-4)
        assert np.max(np.absolute(fd.data - 1.0)) < 1e-10

    def test_fd_of_sum_of_squares(self):
        fd = ad.finite_diff_grad(lambda t: ad.sum(ad.square(t)), ad.Tensor([3.0]), step=1e-5)
        assert abs(fd.data[0] - 6.0) < 1e-6


def _rand(rng, shape, lo=0.2, hi=1.0):
    """Random values bounded away from the kinks of relu/abs/pool ties."""
    mag = rng.uniform(lo, hi, size=shape)
    return mag * rng.choice([-1.0, 1.0], size=shape)


class TestOpGradientsAgainstFiniteDifferences:
    """Each registered op: analytic gradient vs central differences.

    At least 100 random coordinates per op across trials, double precision,
    rel err <= 1e-4 (sampling stays away from non-differentiable points).
    """

    def test_elementwise_and_reductions(self, rng):
        other = _rand(rng, (4, 5))
        cases = {
            "add": lambda t: ad.sum(ad.add(t, ad.Tensor(other))),
            "sub": lambda t: ad.sum(ad.sub(ad.Tensor(other), t)),
            "mul": lambda t: ad.sum(ad.mul(t, ad.Tensor(other))),
            "scalar_mul": lambda t: ad.sum(ad.scalar_mul(t, -2.5)),
            "abs": lambda t: ad.sum(ad.abs(t)),
            "square": lambda t: ad.sum(ad.square(t)),
            "mean": lambda t: ad.mean(t),
            "mean_axis": lambda t: ad.sum(ad.mean(t, axis=1)),
            "sum_axis": lambda t: ad.sum(ad.square(ad.sum(t, axis=0))),
            "relu": lambda t: ad.sum(ad.relu(t)),
            "channel_variance": lambda t: ad.sum(ad.channel_variance(t)),
        }
        for name, f in cases.items():
            for trial in range(6):
                x = _rand(rng, (4, 5))
                gradcheck(f, x, rng=rng)

    def test_div_stable_grads(self, rng):
        num = _rand(rng, (3, 4))
        den = rng.uniform(0.5, 2.0, size=(3, 4))
        gradcheck(lambda t: ad.sum(ad.div_stable(t, ad.Tensor(den), 1e-3)), num, rng=rng)
        gradcheck(lambda t: ad.sum(ad.div_stable(ad.Tensor(num), t, 1e-3)), den, rng=rng)

    def test_matmul_and_linear_grads(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        bias = rng.normal(size=(2,))
        gradcheck(lambda t: ad.sum(ad.square(ad.matmul(t, ad.Tensor(b)))), a, rng=rng)
        gradcheck(lambda t: ad.sum(ad.square(ad.matmul(ad.Tensor(a), t))), b, rng=rng)
        gradcheck(lambda t: ad.sum(ad.square(ad.linear(t, ad.Tensor(b), ad.Tensor(bias)))), a, rng=rng)
        gradcheck(lambda t: ad.sum(ad.square(ad.linear(ad.Tensor(a), ad.Tensor(b), t))), bias, rng=rng)

    def test_conv2d_grads_all_operands(self, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, 3, 3)) * 0.5
        b = rng.normal(size=(4,))
        for stride, pad in [(1, 0), (1, 1), (2, 1)]:
            f_x = lambda t: ad.sum(ad.square(ad.conv2d(t, ad.Tensor(w), ad.Tensor(b), stride=stride, pad=pad)))
            f_w = lambda t: ad.sum(ad.square(ad.conv2d(ad.Tensor(x), t, ad.Tensor(b), stride=stride, pad=pad)))
            f_b = lambda t: ad.sum(ad.square(ad.conv2d(ad.Tensor(x), ad.Tensor(w), t, stride=stride, pad=pad)))
            gradcheck(f_x, x, rng=rng, n_coords=40)
            gradcheck(f_w, w, rng=rng, n_coords=40)
            gradcheck(f_b, b, rng=rng)

    def test_pooling_grads(self, rng):
        # distinct values avoid max-pool ties
        x = rng.permutation(np.arange(2 * 3 * 4 * 4, dtype=np.float64)).reshape(2, 3, 4, 4) * 0.1
        gradcheck(lambda t: ad.sum(ad.square(ad.maxpool2d(t, 2))), x, rng=rng)
        gradcheck(lambda t: ad.sum(ad.square(ad.avgpool2d(t, 2))), x, rng=rng)

    def test_stack_flatten_reshape_grads(self, rng):
        x = rng.normal(size=(2, 3, 4))
        gradcheck(lambda t: ad.sum(ad.square(ad.flatten(t))), x, rng=rng)
        gradcheck(lambda t: ad.sum(ad.square(ad.reshape(t, (4, 6)))), x, rng=rng)
        gradcheck(
            lambda t: ad.sum(ad.square(ad.stack([ad.scalar_mul(t, 2.0), t]))), x, rng=rng
        )

    def test_softmax_cross_entropy_grad(self, rng):
        logits = rng.normal(size=(5, 4))
        targets = rng.integers(0, 4, size=5)
        gradcheck(lambda t: ad.softmax_cross_entropy(t, targets), logits, rng=rng)

    def test_three_layer_cnn_input_gradient(self, rng):
        """Random small CNN: analytic input grad vs FD, rel err <= 1e-4."""
        w1 = ad.Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.4)
        b1 = ad.Tensor(rng.normal(size=(4,)) * 0.1)
        w2 = ad.Tensor(rng.normal(size=(6, 4, 3, 3)) * 0.4)
        b2 = ad.Tensor(rng.normal(size=(6,)) * 0.1)
        w3 = ad.Tensor(rng.normal(size=(6 * 2 * 2, 3)) * 0.4)
        b3 = ad.Tensor(rng.normal(size=(3,)) * 0.1)
        targets = np.array([1, 2])

        def net(t):
            h = ad.relu(ad.conv2d(t, w1, b1, pad=1))
            h = ad.maxpool2d(h, 2)
            h = ad.relu(ad.conv2d(h, w2, b2, pad=1))
            h = ad.maxpool2d(h, 2)
            return ad.softmax_cross_entropy(ad.linear(ad.flatten(h), w3, b3), targets)

        x = rng.normal(size=(2, 3, 8, 8))
        gradcheck(net, x, step=1e-4, tol=1e-4, rng=rng, n_coords=120)
