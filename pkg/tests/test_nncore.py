"""Op-level checks for the tensor core: hand values, gradient oracles, invariants."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import cotmae.nncore as nn
from cotmae.nncore import MaskingError, Parameter, ShapeError, Tensor, grad_check

LN_100 = 4.605170185988092  # -log(1/100)


def _param(name, rng, shape):
    return Parameter(name, rng.uniform(-2, 2, size=shape))


def _fd_check(build_loss, params, tol=1e-5):
    err = grad_check(build_loss, params, eps=1e-4, samples_per_param=200,
                     rng=np.random.default_rng(7))
    assert err < tol, f"finite-difference mismatch: {err}"


class TestMatmul:
    def test_hand_value(self):
        a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        b = Tensor(np.array([[1.0], [1.0]]))
        np.testing.assert_array_equal(nn.matmul(a, b).numpy(), [[3.0], [7.0]])

    def test_identity(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(4, 4)))
        np.testing.assert_allclose(nn.matmul(a, Tensor(np.eye(4))).numpy(), a.numpy())

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            nn.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_gradient_oracle(self):
        rng = np.random.default_rng(1)
        a = _param("a", rng, (4, 5))
        b = _param("b", rng, (5, 3))
        _fd_check(lambda: nn.tsum(nn.matmul(a, b)), [a, b])

    def test_batched_gradient_oracle(self):
        rng = np.random.default_rng(2)
        a = _param("a", rng, (3, 4, 5))
        b = _param("b", rng, (5, 3))
        _fd_check(lambda: nn.tsum(nn.matmul(a, b)), [a, b])


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        x = Tensor(np.full((2, 4), 3.0))
        g = Tensor(np.ones(4))
        b = Tensor(np.zeros(4))
        np.testing.assert_allclose(nn.layer_norm(x, g, b).numpy(), 0.0, atol=1e-5)

    def test_two_point_row(self):
        # mean 2, population variance 1 -> [-1, 1]
        out = nn.layer_norm(Tensor(np.array([[1.0, 3.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.numpy(), [[-1.0, 1.0]], atol=1e-6)

    def test_gradient_oracle(self):
        rng = np.random.default_rng(3)
        x = _param("x", rng, (3, 6))
        g = _param("g", rng, (6,))
        b = _param("b", rng, (6,))
        _fd_check(lambda: nn.tsum(nn.mul(nn.layer_norm(x, g, b), nn.layer_norm(x, g, b))), [x, g, b])


class TestActivations:
    def test_gelu_zero(self):
        assert nn.gelu(Tensor(np.zeros(3))).numpy()[0] == 0.0

    def test_gelu_gradient_oracle(self):
        rng = np.random.default_rng(4)
        x = _param("x", rng, (20,))
        _fd_check(lambda: nn.tsum(nn.gelu(x)), [x])

    def test_softmax_symmetry(self):
        out = nn.softmax(Tensor(np.zeros((1, 2)))).numpy()
        np.testing.assert_allclose(out, [[0.5, 0.5]])

    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=8),
           st.floats(-10, 10))
    @settings(max_examples=50, deadline=None)
    def test_softmax_shift_invariance_and_normalization(self, row, c):
        x = np.array([row])
        a = nn.softmax(Tensor(x)).numpy()
        b = nn.softmax(Tensor(x + c)).numpy()
        np.testing.assert_allclose(a, b, atol=1e-6)
        assert abs(a.sum() - 1.0) < 1e-6
        assert (a >= 0).all() and (a <= 1).all()

    def test_softmax_empty_axis(self):
        with pytest.raises(ShapeError):
            nn.softmax(Tensor(np.zeros((2, 0))))

    def test_softmax_gradient_oracle(self):
        rng = np.random.default_rng(5)
        x = _param("x", rng, (3, 5))
        w = Tensor(rng.normal(size=(3, 5)))
        _fd_check(lambda: nn.tsum(nn.mul(nn.softmax(x), w)), [x])


class TestEmbeddingLookup:
    def test_gathers_rows(self):
        table = Parameter("t", np.arange(12.0).reshape(4, 3))
        out = nn.embedding_lookup(table, [[1, 0], [3, 3]])
        np.testing.assert_array_equal(out.numpy()[1, 1], table.data[3])

    def test_scatter_gradient(self):
        table = Parameter("t", np.zeros((4, 2)))
        out = nn.tsum(nn.embedding_lookup(table, [0, 0, 2]))
        out.backward()
        np.testing.assert_array_equal(table.grad, [[2, 2], [0, 0], [1, 1], [0, 0]])

    def test_out_of_range(self):
        with pytest.raises(ShapeError):
            nn.embedding_lookup(Parameter("t", np.zeros((4, 2))), [4])


class TestMaskedCrossEntropy:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((3, 100)))
        labels = [nn.IGNORE_INDEX, 17, nn.IGNORE_INDEX]
        loss = nn.masked_cross_entropy(logits, labels)
        assert abs(loss.item() - LN_100) < 1e-9

    def test_saturated_logit(self):
        # log(1 + 3*exp(-20)) ~ 6.2e-9
        arr = np.zeros((1, 4))
        arr[0, 2] = 20.0
        loss = nn.masked_cross_entropy(Tensor(arr), [2])
        assert loss.item() < 1e-8

    def test_ignored_positions_get_zero_gradient(self):
        logits = Parameter("l", np.random.default_rng(0).normal(size=(4, 6)))
        loss = nn.masked_cross_entropy(logits, [2, nn.IGNORE_INDEX, 0, nn.IGNORE_INDEX])
        loss.backward()
        np.testing.assert_array_equal(logits.grad[1], 0.0)
        np.testing.assert_array_equal(logits.grad[3], 0.0)
        assert np.abs(logits.grad[0]).sum() > 0

    def test_all_ignored_errors(self):
        with pytest.raises(MaskingError, match="no masked positions"):
            nn.masked_cross_entropy(Tensor(np.zeros((2, 4))), [nn.IGNORE_INDEX] * 2)

    def test_gradient_oracle(self):
        rng = np.random.default_rng(6)
        logits = _param("l", rng, (5, 7))
        labels = [3, nn.IGNORE_INDEX, 0, 6, nn.IGNORE_INDEX]
        _fd_check(lambda: nn.masked_cross_entropy(logits, labels), [logits])


class TestTapeMechanics:
    def test_grad_accumulates_until_zeroed(self):
        p = Parameter("p", np.ones(3))
        nn.tsum(p).backward()
        nn.tsum(p).backward()
        np.testing.assert_array_equal(p.grad, 2.0)
        p.zero_grad()
        np.testing.assert_array_equal(p.grad, 0.0)

    def test_backward_of_sum_equals_sum_of_backwards(self):
        rng = np.random.default_rng(8)
        p = Parameter("p", rng.normal(size=(4, 4)))
        w1 = Tensor(rng.normal(size=(4, 4)))
        w2 = Tensor(rng.normal(size=(4, 4)))

        def losses():
            return nn.tsum(nn.matmul(p, w1)), nn.tsum(nn.mul(nn.gelu(p), w2))

        l1, l2 = losses()
        (l1 + l2).backward()
        combined = p.grad.copy()
        p.zero_grad()
        l1, l2 = losses()
        l1.backward()
        l2.backward()
        np.testing.assert_allclose(p.grad, combined, rtol=1e-12)

    def test_no_grad_suppresses_tape(self):
        p = Parameter("p", np.ones(3))
        with nn.no_grad():
            out = nn.tsum(p)
        assert not out.requires_grad

    def test_diamond_graph_gradient(self):
        # x used twice: d/dx (x*x + x) = 2x + 1
        p = Parameter("p", np.array([3.0]))
        (nn.tsum(nn.mul(p, p)) + nn.tsum(p)).backward()
        np.testing.assert_allclose(p.grad, [7.0])

    @given(st.integers(1, 4), st.integers(1, 4))
    @settings(max_examples=20, deadline=None)
    def test_finite_inputs_stay_finite(self, rows, cols):
        rng = np.random.default_rng(rows * 10 + cols)
        x = Tensor(rng.uniform(-2, 2, size=(rows, cols)))
        g = Tensor(np.ones(cols))
        b = Tensor(np.zeros(cols))
        for out in (nn.gelu(x), nn.softmax(x), nn.layer_norm(x, g, b)):
            assert np.isfinite(out.numpy()).all()


class TestGradCheckOracle:
    def test_linear_function_is_exact(self):
        rng = np.random.default_rng(9)
        p = Parameter("p", rng.uniform(0.5, 2.0, size=(5,)))
        c = Tensor(rng.uniform(0.5, 2.0, size=(5,)))
        err = grad_check(lambda: nn.tsum(nn.mul(p, c)), [p])
        assert err < 1e-9

    def test_zero_function(self):
        p = Parameter("p", np.ones(4))
        err = grad_check(lambda: nn.tsum(nn.mul(p, Tensor(np.zeros(4)))), [p])
        assert err == 0.0

    def test_requires_float64(self):
        p = Parameter("p", np.ones(2, dtype=np.float32))
        with pytest.raises(ValueError, match="float64"):
            grad_check(lambda: nn.tsum(p), [p])

    def test_non_finite_loss_errors(self):
        p = Parameter("p", np.array([np.inf]))
        with pytest.raises(ValueError, match="finite"):
            grad_check(lambda: nn.tsum(p), [p])


class TestStructuralOps:
    def test_concat_narrow_roundtrip_gradients(self):
        rng = np.random.default_rng(10)
        a = _param("a", rng, (2, 3, 4))
        b = _param("b", rng, (2, 1, 4))
        def loss():
            joined = nn.concat(b, nn.narrow(a, 1, 1, 2), axis=1)
            return nn.tsum(nn.mul(joined, joined))
        _fd_check(loss, [a, b])

    def test_transpose_reshape_gradients(self):
        rng = np.random.default_rng(11)
        a = _param("a", rng, (2, 3, 4))
        def loss():
            t = nn.reshape(nn.transpose(a, (1, 0, 2)), (3, 8))
            return nn.tsum(nn.mul(t, t))
        _fd_check(loss, [a])

    def test_take_rows_gradient(self):
        rng = np.random.default_rng(12)
        a = _param("a", rng, (6, 3))
        _fd_check(lambda: nn.tsum(nn.mul(nn.take_rows(a, [0, 2, 2, 5]),
                                         nn.take_rows(a, [0, 2, 2, 5]))), [a])
