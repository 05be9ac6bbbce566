import numpy as np
import pytest

from dasiam.autodiff import Tensor, check_gradients, numerical_grad, ops, precision, relative_error
from dasiam.errors import ConfigurationError, ContractError, DimensionError
from oracles import conv2d_loops, xcorr_loops


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


def leaf(arr):
    return Tensor(arr, requires_grad=True)


class TestConv2d:
    def test_all_ones_sums_to_nine(self):
        out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 1, 1)
        assert out.data.item() == 9.0

    def test_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((1, 1, 5, 5))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = ops.conv2d(Tensor(x), Tensor(k), padding=1)
        np.testing.assert_array_equal(out.data, x.astype(np.float32))

    def test_matches_loop_oracle(self, f64):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 5, 5))
        k = rng.standard_normal((3, 2, 3, 3))
        out = ops.conv2d(Tensor(x), Tensor(k))
        np.testing.assert_allclose(out.data, conv2d_loops(x, k), atol=1e-6)

    @pytest.mark.parametrize("stride,padding", [(2, 1), (1, 2), (3, 1)])
    def test_strided_padded_matches_oracle(self, f64, stride, padding):
        rng = np.random.default_rng(stride * 10 + padding)
        x = rng.standard_normal((2, 2, 7, 7))
        k = rng.standard_normal((2, 2, 3, 3))
        out = ops.conv2d(Tensor(x), Tensor(k), stride=stride, padding=padding)
        np.testing.assert_allclose(out.data, conv2d_loops(x, k, stride, padding), atol=1e-9)

    def test_inexact_output_size_is_rejected(self):
        with pytest.raises(ConfigurationError):
            ops.conv2d(Tensor(np.ones((1, 1, 6, 6))), Tensor(np.ones((1, 1, 3, 3))), stride=2)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            ops.conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))))

    def test_kernel_larger_than_input(self):
        with pytest.raises(DimensionError):
            ops.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


class TestDepthwiseXcorr:
    def test_self_match_peak(self):
        rng = np.random.default_rng(2)
        search = rng.standard_normal((1, 1, 9, 9))
        template = search[:, :, 3:7, 2:6].copy()
        # unnormalised correlation only peaks at the match if it dominates in energy
        search2 = search * 0.1
        search2[:, :, 3:7, 2:6] = template
        out = ops.depthwise_xcorr(Tensor(search2), Tensor(template)).data[0, 0]
        assert np.unravel_index(out.argmax(), out.shape) == (3, 2)

    def test_zero_template(self):
        out = ops.depthwise_xcorr(Tensor(np.ones((1, 2, 6, 6))), Tensor(np.zeros((1, 2, 3, 3))))
        assert not out.data.any()

    def test_matches_loop_oracle(self, f64):
        rng = np.random.default_rng(3)
        s = rng.standard_normal((1, 3, 8, 8))
        t = rng.standard_normal((1, 3, 4, 4))
        np.testing.assert_allclose(ops.depthwise_xcorr(Tensor(s), Tensor(t)).data, xcorr_loops(s, t), atol=1e-6)

    def test_template_larger_than_search(self):
        with pytest.raises(DimensionError):
            ops.depthwise_xcorr(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 4, 4))))


class TestGradReverse:
    def test_forward_identity(self):
        x = leaf([1.0, -2.0])
        y = ops.grad_reverse(x, 1.0)
        np.testing.assert_array_equal(y.data, x.data)

    def test_sign_flip(self):
        x = leaf([1.0, -2.0])
        (ops.grad_reverse(x, 1.0) * Tensor([1.0, -2.0])).sum().backward()
        np.testing.assert_array_equal(x.grad, [-1.0, 2.0])

    def test_zero_lambda_blocks(self):
        x = leaf([1.0, -2.0])
        (ops.grad_reverse(x, 0.0) * Tensor([1.0, -2.0])).sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_scaled_composition_equals_negated_plain(self, f64):
        rng = np.random.default_rng(4)
        w = rng.standard_normal((3, 4))
        x1, x2 = leaf(rng.standard_normal((2, 4))), None
        x2 = leaf(x1.data.copy())
        ops.sigmoid(ops.linear(ops.grad_reverse(x1, 0.7), Tensor(w))).sum().backward()
        ops.sigmoid(ops.linear(x2, Tensor(w))).sum().backward()
        np.testing.assert_allclose(x1.grad, -0.7 * x2.grad, rtol=1e-12)


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.arange(6.0).reshape(2, 3))
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square(self):
        x = leaf([3.0])
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_accumulates_without_reset(self):
        x = leaf([3.0])
        loss = (x * x).sum()
        loss.backward()
        loss.backward()
        np.testing.assert_array_equal(x.grad, [12.0])

    def test_non_scalar_rejected(self):
        with pytest.raises(ContractError):
            leaf([1.0, 2.0]).backward()

    def test_shared_subexpression_visited_once(self):
        x = leaf([2.0])
        y = x * x
        (y + y).sum().backward()
        np.testing.assert_array_equal(x.grad, [8.0])

    def test_graph_is_topological(self):
        x = leaf([1.0])
        y = ops.relu(x * 2.0)
        z = (y + x).sum()
        order = z.graph()
        pos = {id(n): i for i, n in enumerate(order)}
        for node in order:
            for p in node._parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(node)]

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(11)
            x = leaf(rng.standard_normal((1, 2, 6, 6)))
            k = leaf(rng.standard_normal((2, 2, 3, 3)))
            ops.relu(ops.conv2d(x, k, padding=1)).sum().backward()
            return x.grad.tobytes(), k.grad.tobytes()

        assert run() == run()


def _rand(rng, *shape):
    return leaf(rng.standard_normal(shape))


def _const(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def _bce_case(rng):
    target = rng.integers(0, 2, (3, 4))
    return lambda p: ops.binary_cross_entropy(p, target), [leaf(rng.uniform(0.05, 0.95, (3, 4)))]


def _smooth_l1_case(rng):
    target = rng.standard_normal((4, 4))
    return lambda x: ops.smooth_l1(x, target), [_rand(rng, 4, 4)]


def _bilinear_case(rng):
    ys, xs = rng.uniform(-0.5, 4.5, 7), rng.uniform(-0.5, 5.5, 7)
    return lambda f: ops.bilinear_sample(f, ys, xs), [_rand(rng, 2, 4, 5)]


def _softmax_case(rng):
    w = _const(rng, 2, 3)
    return lambda x: ops.softmax(x, axis=1) * w, [_rand(rng, 2, 3)]


def _log_softmax_case(rng):
    w = _const(rng, 3, 2)
    return lambda x: ops.log_softmax(x, axis=0) * w, [_rand(rng, 3, 2)]


GRAD_CASES = {
    "conv2d": lambda rng: (lambda x, k: ops.conv2d(x, k, stride=2, padding=1), [_rand(rng, 1, 2, 5, 5), _rand(rng, 3, 2, 3, 3)]),
    "xcorr": lambda rng: (ops.depthwise_xcorr, [_rand(rng, 2, 2, 6, 6), _rand(rng, 2, 2, 3, 3)]),
    "linear": lambda rng: (ops.linear, [_rand(rng, 3, 4), _rand(rng, 2, 4), _rand(rng, 2)]),
    "relu": lambda rng: (ops.relu, [_rand(rng, 3, 5)]),
    "maxpool": lambda rng: (lambda x: ops.maxpool2d(x, 2), [_rand(rng, 1, 2, 4, 4)]),
    "sigmoid": lambda rng: (ops.sigmoid, [_rand(rng, 4, 3)]),
    "softmax": _softmax_case,
    "log_softmax": _log_softmax_case,
    "add_mul": lambda rng: (lambda a, b: a * b + a, [_rand(rng, 2, 3), _rand(rng, 1, 3)]),
    "bce": _bce_case,
    "smooth_l1": _smooth_l1_case,
    "bilinear": _bilinear_case,
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences_f64(f64, name, seed):
    fn, inputs = GRAD_CASES[name](np.random.default_rng(seed))
    err = check_gradients(lambda: fn(*inputs).sum(), inputs)
    assert err < 1e-6, f"{name}: relative error {err:.2e}"


@pytest.mark.parametrize("seed", range(3))
def test_grad_reverse_composition_is_negated_finite_difference(f64, seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, 5)
    w = _const(rng, 5)
    ops.sigmoid(ops.grad_reverse(x, 0.5) * w).sum().backward()
    numeric = numerical_grad(lambda: ops.sigmoid(x * w).sum(), x)
    assert relative_error(x.grad, -0.5 * numeric) < 1e-6


def test_gradients_float32_within_1e3():
    rng = np.random.default_rng(7)
    x = leaf(rng.standard_normal((1, 2, 5, 5)))
    k = leaf(rng.standard_normal((2, 2, 3, 3)))
    err = check_gradients(lambda: ops.sigmoid(ops.conv2d(x, k, padding=1)).sum(), [x, k], eps=1e-2)
    assert err < 1e-3


def test_forward_values_finite():
    rng = np.random.default_rng(8)
    x = Tensor(rng.standard_normal((2, 3)) * 100)
    for out in (ops.sigmoid(x), ops.softmax(x), ops.log_softmax(x)):
        assert np.isfinite(out.data).all()
