"""Core autodiff engine: op correctness, broadcasting, graph mechanics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from focusrank.errors import DimensionError, UsageError
from focusrank.tensor import (
    Tensor,
    broadcast_to,
    concat,
    gelu,
    log_softmax,
    no_grad,
    normalize_rows,
    silu,
    softmax,
    take,
)

RNG = np.random.default_rng(7)


def numeric_grad(f, x, eps=1e-6):
    """Central finite differences of scalar f at ndarray x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def check_op(op, shape, positive=False):
    x_val = RNG.uniform(0.5, 2.0, shape) if positive else RNG.normal(size=shape)
    x = Tensor(x_val.copy(), requires_grad=True)
    out = op(x)
    loss = (out * out).sum()
    loss.backward()

    def f(arr):
        return float((op(Tensor(arr)) ** 2).data.sum())

    expected = numeric_grad(f, x_val.copy())
    np.testing.assert_allclose(x.grad, expected, rtol=1e-5, atol=1e-7)


class TestElementwiseGradients:
    def test_add_mul(self):
        check_op(lambda t: t * 3.0 + t * t, (4, 3))

    def test_matmul(self):
        w = Tensor(RNG.normal(size=(3, 5)))
        check_op(lambda t: t @ w, (4, 3))

    def test_batched_matmul_broadcast(self):
        w = Tensor(RNG.normal(size=(3, 5)))
        check_op(lambda t: t @ w, (2, 4, 3))

    def test_exp_log(self):
        check_op(lambda t: (t.exp() + t.log()), (6,), positive=True)

    def test_tanh_sqrt_pow(self):
        check_op(lambda t: t.tanh() + t.sqrt() + t**1.5, (5,), positive=True)

    def test_division_by_tensor(self):
        d = Tensor(np.array(0.37), requires_grad=True)
        x = Tensor(RNG.normal(size=(3,)))
        loss = ((x / d) ** 2).sum()
        loss.backward()
        expected = numeric_grad(
            lambda a: float(((x.data / a) ** 2).sum()), np.array(0.37)
        )
        np.testing.assert_allclose(d.grad, expected, rtol=1e-6)

    def test_gelu(self):
        check_op(gelu, (7,))

    def test_silu(self):
        check_op(silu, (7,))

    def test_softmax_grad(self):
        check_op(lambda t: softmax(t, axis=-1), (3, 4))

    def test_log_softmax_grad(self):
        check_op(lambda t: log_softmax(t, axis=-1), (3, 4))

    def test_reductions(self):
        check_op(lambda t: t.sum(axis=0) * t.mean(axis=1).sum(), (3, 4))

    def test_getitem_reshape_swap(self):
        check_op(lambda t: t[1:, :2].reshape(2, 2).swapaxes(0, 1), (3, 3))

    def test_take_scatter_add(self):
        idx = np.array([[0, 2], [2, 2]])
        check_op(lambda t: take(t, idx), (3, 4))

    def test_concat(self):
        other = Tensor(RNG.normal(size=(2, 4)))
        check_op(lambda t: concat([t, other, t], axis=0), (2, 4))

    def test_broadcast_to(self):
        check_op(lambda t: broadcast_to(t, (5, 3, 4)), (3, 4))


class TestBroadcastingBackward:
    def test_bias_add_unbroadcasts(self):
        b = Tensor(RNG.normal(size=(4,)), requires_grad=True)
        x = Tensor(RNG.normal(size=(3, 4)))
        ((x + b) ** 2).sum().backward()
        assert b.grad.shape == (4,)
        np.testing.assert_allclose(b.grad, (2 * (x.data + b.data)).sum(axis=0))

    def test_keepdim_mul(self):
        s = Tensor(RNG.normal(size=(3, 1)), requires_grad=True)
        x = Tensor(RNG.normal(size=(3, 4)))
        ((x * s).sum()).backward()
        np.testing.assert_allclose(s.grad, x.data.sum(axis=1, keepdims=True))


class TestGraphMechanics:
    def test_diamond_accumulates(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * x + x * 3.0
        y.backward()
        assert float(x.grad) == pytest.approx(2 * 2.0 + 3.0)

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(UsageError):
            (x * 2).backward()

    def test_no_grad_blocks_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (x * 2).sum()
        assert not y.requires_grad and y._parents == ()

    def test_detach(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = (x.detach() * 2).sum()
        assert not y.requires_grad

    def test_matmul_shape_errors(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones(3)) @ Tensor(np.ones((3, 2)))
        with pytest.raises(DimensionError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))

    def test_float64_everywhere(self):
        out = Tensor(np.ones(3, dtype=np.float32)) + 1
        assert out.data.dtype == np.float64


@settings(deadline=None, max_examples=50)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_rows_are_distributions(values):
    y = softmax(Tensor(np.array(values))).data
    assert np.all(y >= 0)
    assert abs(y.sum() - 1.0) < 1e-12


@settings(deadline=None, max_examples=50)
@given(
    st.lists(st.floats(-30, 30), min_size=2, max_size=8),
    st.floats(-100, 100),
)
def test_softmax_shift_invariance(values, shift):
    base = softmax(Tensor(np.array(values))).data
    shifted = softmax(Tensor(np.array(values) + shift)).data
    np.testing.assert_allclose(shifted, base, atol=1e-12)


def test_operations_keep_finite_inputs_finite():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = Tensor(rng.normal(size=(4, 6)) * 100)
        outputs = [
            softmax(x).data,
            log_softmax(x).data,
            gelu(x).data,
            silu(x).data,
            (x * x).sum().data,
            normalize_rows(x).data,
        ]
        for out in outputs:
            assert np.all(np.isfinite(out))


def test_normalize_rows_unit_norm():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 8)) * np.logspace(-3, 3, 5)[:, None]
    norms = np.linalg.norm(normalize_rows(Tensor(x)).data, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-9)


def test_normalize_rows_scale_invariant():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 8))
    a = normalize_rows(Tensor(x)).data
    b = normalize_rows(Tensor(x * 137.5)).data
    np.testing.assert_allclose(a, b, atol=1e-9)
