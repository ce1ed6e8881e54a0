import numpy as np
import numpy.testing as npt
import pytest

from stnet.tensor import (ShapeMismatchError, Tensor, add, backward, concat,
                          finite_diff_check, gelu, mac_counter, matmul, mul,
                          no_grad, reshape, scale, sigmoid, softmax, sub,
                          tensor_sum, transpose)


def t64(data, requires_grad=False, name=None):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad, name=name)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = matmul(t64(np.eye(2)), t64(a))
        npt.assert_array_equal(out.data, a)
        out = matmul(t64(a), t64(np.eye(2)))
        npt.assert_array_equal(out.data, a)

    def test_hand_case(self):
        out = matmul(t64([[1.0, 2.0], [3.0, 4.0]]), t64([[5.0], [6.0]]))
        npt.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeMismatchError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(t64(np.zeros((2, 3))), t64(np.zeros((2, 3))))

    def test_batch_broadcast(self, rng):
        a = rng.normal(size=(4, 2, 3))
        b = rng.normal(size=(3, 5))
        out = matmul(t64(a), t64(b))
        npt.assert_allclose(out.data, a @ b, rtol=1e-12)

    def test_grad_matches_finite_differences(self, rng):
        b = rng.normal(size=(3, 3))
        a0 = rng.normal(size=(3, 3))
        err = finite_diff_check(
            lambda a: tensor_sum(matmul(a, t64(b))), t64(a0), eps=1e-6)
        assert err < 1e-5

    def test_grad_right_operand(self, rng):
        a = rng.normal(size=(2, 4))
        b0 = rng.normal(size=(4, 3))
        err = finite_diff_check(
            lambda b: tensor_sum(mul(matmul(t64(a), b), matmul(t64(a), b))),
            t64(b0), eps=1e-6)
        assert err < 1e-5


class TestElementwise:
    def test_gelu_center_and_asymptote(self):
        assert gelu(t64([0.0])).item() == 0.0
        assert abs(gelu(t64([10.0])).item() - 10.0) < 1e-6

    def test_sigmoid_center(self):
        assert sigmoid(t64([0.0])).item() == 0.5

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            add(t64(np.zeros(3)), t64(np.zeros(4)))

    def test_mixed_dtype_rejected(self):
        with pytest.raises(TypeError):
            add(Tensor(np.zeros(2, dtype=np.float32)), t64(np.zeros(2)))

    @pytest.mark.parametrize("op", [add, sub, mul])
    def test_binary_grads(self, op, rng):
        a0 = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 4))
        err = finite_diff_check(
            lambda a: tensor_sum(mul(op(a, t64(b)), op(a, t64(b)))), t64(a0), eps=1e-6)
        assert err < 1e-5

    @pytest.mark.parametrize("op", [sigmoid, gelu])
    def test_unary_grads(self, op, rng):
        x0 = rng.normal(size=(5, 3))
        err = finite_diff_check(lambda x: tensor_sum(op(x)), t64(x0), eps=1e-6)
        assert err < 1e-5

    def test_broadcast_grad(self, rng):
        x0 = rng.normal(size=(4,))
        big = rng.normal(size=(3, 4))
        err = finite_diff_check(
            lambda x: tensor_sum(mul(add(t64(big), x), add(t64(big), x))),
            t64(x0), eps=1e-6)
        assert err < 1e-5

    def test_scale(self, rng):
        x = t64(rng.normal(size=(3,)), requires_grad=True)
        y = tensor_sum(scale(x, -2.5))
        backward(y)
        npt.assert_allclose(x.grad, -2.5 * np.ones(3), rtol=1e-12)


class TestSoftmax:
    def test_uniform(self):
        out = softmax(t64([0.0, 0.0, 0.0, 0.0]), axis=-1)
        npt.assert_allclose(out.data, 0.25 * np.ones(4), rtol=1e-12)

    def test_overflow_stability(self):
        out = softmax(t64([1000.0, 0.0]), axis=-1)
        assert np.all(np.isfinite(out.data))
        npt.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    def test_rows_sum_to_one_and_bounded(self, rng):
        x = rng.normal(size=(6, 9)) * 5
        out = softmax(t64(x), axis=1)
        npt.assert_allclose(out.data.sum(axis=1), np.ones(6), atol=1e-6)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_axis_out_of_range(self):
        with pytest.raises(ShapeMismatchError):
            softmax(t64(np.zeros((2, 2))), axis=5)

    def test_grad_matches_finite_differences(self, rng):
        x0 = rng.normal(size=(4, 5))
        w = rng.normal(size=(4, 5))
        err = finite_diff_check(
            lambda x: tensor_sum(mul(softmax(x, axis=-1), t64(w))), t64(x0), eps=1e-6)
        assert err < 1e-5


class TestStructural:
    def test_reshape_transpose_roundtrip(self, rng):
        x = t64(rng.normal(size=(2, 3, 4)))
        y = transpose(reshape(x, (6, 4)), (1, 0))
        assert y.shape == (4, 6)

    def test_concat_grads(self, rng):
        a0 = rng.normal(size=(2, 3))
        b = rng.normal(size=(2, 2))
        err = finite_diff_check(
            lambda a: tensor_sum(mul(concat([a, t64(b)], axis=1),
                                     concat([a, t64(b)], axis=1))),
            t64(a0), eps=1e-6)
        assert err < 1e-5

    def test_transpose_grad(self, rng):
        x0 = rng.normal(size=(2, 3, 4))
        w = rng.normal(size=(4, 2, 3))
        err = finite_diff_check(
            lambda x: tensor_sum(mul(transpose(x, (2, 0, 1)), t64(w))),
            t64(x0), eps=1e-6)
        assert err < 1e-5

    def test_sum_axis_grad(self, rng):
        x0 = rng.normal(size=(3, 4))
        err = finite_diff_check(
            lambda x: tensor_sum(mul(tensor_sum(x, axis=1), tensor_sum(x, axis=1))),
            t64(x0), eps=1e-6)
        assert err < 1e-5


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = t64(rng.normal(size=(3, 5)), requires_grad=True)
        backward(tensor_sum(x))
        npt.assert_array_equal(x.grad, np.ones((3, 5)))

    def test_square_gives_two_x(self, rng):
        x = t64(rng.normal(size=(4,)), requires_grad=True)
        backward(tensor_sum(mul(x, x)))
        npt.assert_allclose(x.grad, 2 * x.data, rtol=1e-12)

    def test_accumulation_over_reuse(self):
        x = t64([3.0], requires_grad=True)
        y = add(mul(x, x), x)  # x^2 + x -> 2x + 1 = 7
        backward(tensor_sum(y))
        npt.assert_allclose(x.grad, [7.0], rtol=1e-12)

    def test_non_scalar_root_rejected(self):
        x = t64(np.zeros((2, 2)), requires_grad=True)
        y = mul(x, x)
        with pytest.raises(ValueError, match="scalar"):
            backward(y)

    def test_tape_consumed(self):
        x = t64([1.0, 2.0], requires_grad=True)
        y = tensor_sum(mul(x, x))
        backward(y)
        with pytest.raises(RuntimeError, match="tape"):
            backward(y)

    def test_named_leaf_map(self):
        x = t64([1.0, 2.0], requires_grad=True, name="w")
        grads = backward(tensor_sum(mul(x, x)))
        npt.assert_allclose(grads["w"], [2.0, 4.0], rtol=1e-12)

    def test_no_grad_suppresses_recording(self):
        x = t64([1.0], requires_grad=True)
        with no_grad():
            y = tensor_sum(mul(x, x))
        assert not y.requires_grad
        with pytest.raises(RuntimeError):
            backward(y)

    def test_determinism(self, rng):
        x = rng.normal(size=(8, 8))

        def run():
            return softmax(matmul(t64(x), t64(x)), axis=-1).data

        npt.assert_array_equal(run(), run())


class TestFiniteDiffCheck:
    def test_exact_linear(self, rng):
        err = finite_diff_check(tensor_sum, t64(rng.normal(size=(4, 4))), eps=1e-4)
        assert err < 1e-10

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            finite_diff_check(tensor_sum, t64([1.0]), eps=0.0)

    def test_attention_style_readout(self, rng):
        w = rng.normal(size=(6, 6))
        v = rng.normal(size=(6, 6))

        def f(x):
            attn = softmax(scale(matmul(x, transpose(x, (1, 0))), 0.5), axis=-1)
            return tensor_sum(mul(matmul(attn, t64(v)), t64(w)))

        err = finite_diff_check(f, t64(rng.normal(size=(6, 6))), eps=1e-6)
        assert err < 1e-4


class TestMacCounter:
    def test_matmul_count(self):
        a = t64(np.zeros((4, 5)))
        b = t64(np.zeros((5, 6)))
        with mac_counter() as counts:
            matmul(a, b)
        assert counts["matmul"] == 4 * 5 * 6

    def test_batched_and_tagged(self):
        a = t64(np.zeros((2, 3, 4, 5)))
        b = t64(np.zeros((2, 3, 5, 6)))
        with mac_counter() as counts:
            matmul(a, b, tag="score")
        assert counts["score"] == 2 * 3 * 4 * 5 * 6
