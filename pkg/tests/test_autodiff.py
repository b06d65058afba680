import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradsuite import block_case, op_cases, run_case
from sertk.autodiff import Tensor, debug_mode, gradcheck, no_grad, relative_error
from sertk.autodiff import ops
from sertk.errors import GraphConsumed, NonFiniteValue, NotScalarLoss, ShapeMismatch


class TestForward:
    def test_softmax_uniform(self):
        assert ops.softmax(Tensor(np.zeros(4))).data.tolist() == [0.25] * 4

    def test_cross_entropy_uniform(self):
        for target in range(4):
            loss = ops.cross_entropy(Tensor(np.zeros((1, 4))), [target])
            assert loss.item() == pytest.approx(math.log(4), abs=1e-7)

    def test_matmul_oracle(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 4))
        want = [[sum(a[i, k] * b[k, j] for k in range(3)) for j in range(4)] for i in range(2)]
        got = ops.matmul(Tensor(a), Tensor(b))
        assert got.shape == (2, 4)
        assert np.max(np.abs(got.data - np.array(want))) < 1e-6

    def test_layer_norm_moments(self, rng):
        x = Tensor(rng.normal(3.0, 2.0, size=(5, 16)), dtype=np.float64)
        y = ops.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
        assert np.allclose(y.data.mean(axis=-1), 0.0, atol=1e-12)
        assert np.allclose(y.data.var(axis=-1), 1.0, atol=1e-5)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 40), st.floats(0.1, 50.0))
    def test_softmax_simplex(self, rows, cols, spread):
        x = np.random.default_rng(rows * 100 + cols).normal(scale=spread, size=(rows, cols)).astype(np.float32)
        y = ops.softmax(Tensor(x)).data
        assert np.all(y >= 0)
        assert np.max(np.abs(y.sum(axis=-1) - 1)) <= 1e-6

    def test_gelu_reference(self):
        x = np.linspace(-4, 4, 9)
        want = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
        assert np.allclose(ops.gelu(Tensor(x, dtype=np.float64)).data, want, rtol=1e-14)

    def test_float32_default(self):
        assert Tensor([1, 2]).dtype == np.float32
        assert Tensor(np.zeros(2)).dtype == np.float64

    def test_shape_errors(self):
        with pytest.raises(ShapeMismatch):
            ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
        with pytest.raises(ShapeMismatch):
            ops.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))
        with pytest.raises(ShapeMismatch):
            ops.cross_entropy(Tensor(np.zeros((2, 4))), [0, 4])
        with pytest.raises(ShapeMismatch):
            ops.reshape(Tensor(np.zeros(6)), (4, 2))

    def test_bitwise_repeatable(self, rng):
        x = rng.normal(size=(3, 8, 16)).astype(np.float32)
        f = lambda: ops.gelu(ops.softmax(ops.matmul(Tensor(x), Tensor(x[0].T)))).data  # noqa: E731
        assert f().tobytes() == f().tobytes()


class TestBackward:
    def test_square_sum(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        ops.sum(ops.mul(x, x)).backward()
        assert np.array_equal(x.grad, 2 * x.data)

    def test_cross_entropy_grad(self, rng):
        z = Tensor(rng.normal(size=4), requires_grad=True, dtype=np.float64)
        ops.cross_entropy(z, 1).backward()
        p = np.exp(z.data) / np.exp(z.data).sum()
        assert np.allclose(z.grad, p - np.eye(4)[1], atol=1e-15)

    def test_shared_subexpression(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = ops.mul(x, x)
        ops.sum(ops.add(y, y)).backward()
        assert x.grad.tolist() == [12.0]

    def test_not_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(NotScalarLoss):
            ops.mul(x, x).backward()

    def test_double_backward(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = ops.sum(ops.mul(x, x))
        loss.backward()
        with pytest.raises(GraphConsumed):
            loss.backward()

    def test_no_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = ops.sum(ops.mul(x, x))
        assert not y.requires_grad
        y.backward()
        assert x.grad is None

    def test_debug_nonfinite(self):
        x = Tensor(np.array([1.0, 0.0]))
        with debug_mode():
            with pytest.raises(NonFiniteValue):
                ops.mul(x, Tensor(np.array([np.inf, 1.0])))
        ops.mul(x, Tensor(np.array([np.inf, 1.0])))  # silent outside debug mode

    def test_operator_overloads(self):
        x = Tensor(np.array([[2.0, 3.0]]), requires_grad=True, dtype=np.float64)
        ((x * x + 1.0 - x) @ Tensor(np.ones((2, 1)))).sum().backward()
        assert x.grad.tolist() == [[3.0, 5.0]]


class TestGradcheck:
    def test_linear_exact(self, rng):
        a = rng.normal(size=(4, 3))
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        rep = gradcheck(lambda: ops.sum(ops.mul(x, Tensor(a))), x)
        assert rep.passed and rep.max_rel_error < 1e-9

    def test_relative_error_floor(self):
        assert relative_error(np.array([1e-9]), np.array([0.0]))[0] == pytest.approx(1e-6)

    def test_negative_control(self, rng):
        x = Tensor(rng.normal(size=5), requires_grad=True)

        def bad_square(t):
            return Tensor.from_op(t.data ** 2, (t,), lambda g: (g * t.data,), "bad_square")  # missing factor 2

        rep = gradcheck(lambda: ops.sum(bad_square(x)), x)
        assert not rep.passed
        assert sorted(rep.failures) == [(i,) for i in range(5)]

    @pytest.mark.parametrize("seed", range(3))
    def test_every_op(self, seed):
        for name, f, leaves in op_cases(np.random.default_rng(seed)):
            assert run_case(f, leaves) < 1e-4, name

    @pytest.mark.parametrize("variant", ["vit", "beit"])
    def test_encoder_block(self, variant):
        name, f, leaves = block_case(np.random.default_rng(7), variant)
        assert run_case(f, leaves) < 1e-4


class TestFusedAttention:
    def test_matches_unfused(self, rng):
        from sertk.vit import multi_head_attention

        for dt in (np.float32, np.float64):
            z = Tensor(rng.random((3, 7, 8)), dtype=dt)
            uq, um = Tensor(rng.normal(size=(8, 12)), dtype=dt), Tensor(rng.normal(size=(4, 8)), dtype=dt)
            mb, bias = Tensor(np.zeros(8), dtype=dt), Tensor(rng.normal(size=(2, 7, 7)), dtype=dt)
            fused = multi_head_attention(z, uq, um, mb, 2, bias)
            plain, _ = multi_head_attention(z, uq, um, mb, 2, bias, return_weights=True)
            assert np.array_equal(fused.data, plain.data)

    def test_shape_checks(self):
        with pytest.raises(ShapeMismatch):
            ops.fused_attention(Tensor(np.zeros((1, 3, 10))), 2)
        with pytest.raises(ShapeMismatch):
            ops.fused_attention(Tensor(np.zeros((1, 3, 12))), 2, Tensor(np.zeros((2, 4, 4))))
