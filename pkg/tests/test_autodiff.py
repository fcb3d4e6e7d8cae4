"""Tests for the reverse-mode tape: values, gradients, and tape lifecycle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from listalign import autodiff as ad
from listalign.errors import DegenerateInput, StaleTape


def fd_grad(f, x, h=1e-6):
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * h)
    return g


def check_grad(build, x0, rtol=1e-6):
    """build(Var) -> scalar Var; compares tape gradient to finite differences."""
    p = ad.param(x0.copy())
    with ad.Tape() as tape:
        loss = build(p)
    grads = ad.backward(tape, loss)
    analytic = grads[id(p)]

    def eval_loss(x):
        return float(build(ad.constant(x)).value)

    numeric = fd_grad(eval_loss, x0.copy())
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    assert np.linalg.norm(analytic - numeric) / scale < rtol


class TestValues:
    def test_ops_match_numpy(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        va, vb = ad.constant(a), ad.constant(b)
        np.testing.assert_array_equal((va + vb).value, a + b)
        np.testing.assert_array_equal((va * vb).value, a * b)
        np.testing.assert_array_equal((va - vb).value, a - b)
        np.testing.assert_array_equal((va / (vb + 10.0)).value, a / (b + 10.0))
        np.testing.assert_array_equal(ad.exp(va).value, np.exp(a))
        np.testing.assert_array_equal(va.sum(axis=1).value, a.sum(axis=1))

    def test_matmul_batched(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 5, 3, 4)), rng.normal(size=(2, 5, 4, 6))
        out = ad.matmul(ad.constant(a), ad.constant(b))
        np.testing.assert_allclose(out.value, a @ b)

    def test_log_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 7)) * 50  # large values: needs the stable path
        ls = ad.log_softmax(ad.constant(x), axis=1)
        np.testing.assert_allclose(np.exp(ls.value).sum(axis=1), np.ones(4), rtol=1e-12)

    def test_log_sigmoid_extreme_inputs_finite(self):
        x = np.array([-1000.0, -10.0, 0.0, 10.0, 1000.0])
        out = ad.log_sigmoid(ad.constant(x)).value
        assert np.isfinite(out).all()
        assert out[2] == pytest.approx(np.log(0.5))

    def test_logsumexp_with_minus_inf_entries(self):
        x = np.array([[0.0, -np.inf], [1.0, 1.0]])
        out = ad.logsumexp(ad.constant(x), axis=1)
        np.testing.assert_allclose(out.value, [0.0, 1.0 + np.log(2.0)])


class TestGradients:
    def test_elementwise_chain(self):
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=(5, 3))
        check_grad(lambda p: (ad.exp(p) * 0.3 + ad.tanh(p)).sum(), x0)

    def test_matmul_both_sides(self):
        rng = np.random.default_rng(4)
        w = rng.normal(size=(4, 3))
        x0 = rng.normal(size=(6, 4))
        check_grad(lambda p: (p @ ad.constant(w)).sum(), x0)
        x_const = rng.normal(size=(6, 4))
        check_grad(lambda p: (ad.constant(x_const) @ p).sum(), rng.normal(size=(4, 2)))

    def test_broadcast_add_and_mul(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(5, 4))
        check_grad(lambda p: (ad.constant(x) + p).sum(), rng.normal(size=(4,)).reshape(1, 4))
        check_grad(lambda p: (ad.constant(x) * p).sum(), rng.normal(size=(1, 4)))

    def test_gelu(self):
        rng = np.random.default_rng(6)
        check_grad(lambda p: ad.gelu(p).sum(), rng.normal(size=(8, 3)) * 2)

    def test_log_sigmoid(self):
        rng = np.random.default_rng(7)
        check_grad(lambda p: ad.log_sigmoid(p).sum(), rng.normal(size=(9,)).reshape(1, 9) * 3)

    def test_log_softmax(self):
        rng = np.random.default_rng(8)
        x0 = rng.normal(size=(4, 5))
        w = np.eye(4, 5)
        check_grad(lambda p: (ad.log_softmax(p, axis=1) * ad.constant(w)).sum(), x0)

    def test_getitem_advanced_indexing(self):
        rng = np.random.default_rng(9)
        x0 = rng.normal(size=(6, 3))
        idx = (np.array([0, 2, 2]), np.array([1, 0, 2]))  # repeated element
        check_grad(lambda p: (p[idx] * np.array([1.0, 2.0, 3.0])).sum(), x0)

    def test_reshape_transpose_mean(self):
        rng = np.random.default_rng(10)
        x0 = rng.normal(size=(4, 6))
        check_grad(
            lambda p: ad.transpose(p.reshape(4, 3, 2), (1, 0, 2)).mean(axis=(0, 1)).sum(), x0
        )

    def test_fan_out_accumulates(self):
        '''A value consumed twice gets the sum of both branch gradients.'''
        x0 = np.array([[2.0, -1.0]])
        p = ad.param(x0.copy())
        with ad.Tape() as tape:
            y = p * p + p * 3.0
            loss = y.sum()
        g = ad.backward(tape, loss)[id(p)]
        np.testing.assert_allclose(g, 2 * x0 + 3.0)

    def test_stop_gradient_blocks(self):
        p = ad.param(np.array([1.5]))
        with ad.Tape() as tape:
            loss = (ad.stop_gradient(p) * p).sum()
        g = ad.backward(tape, loss)[id(p)]
        np.testing.assert_allclose(g, np.array([1.5]))  # only the live branch

    @settings(max_examples=30, deadline=None)
    @given(
        rows=st.integers(min_value=1, max_value=5),
        cols=st.integers(min_value=1, max_value=5),
        seed=st.integers(min_value=0, max_value=2**31),
    )
    def test_property_random_expression_grads(self, rows, cols, seed):
        rng = np.random.default_rng(seed)
        x0 = rng.normal(size=(rows, cols))
        c = rng.normal(size=(rows, cols))

        def build(p):
            y = ad.tanh(p * ad.constant(c)) + ad.exp(p * 0.1)
            return (y * y).mean()

        check_grad(build, x0, rtol=1e-5)


class TestTapeLifecycle:
    def test_second_backward_raises_stale_tape(self):
        p = ad.param(np.ones(3).reshape(1, 3))
        with ad.Tape() as tape:
            loss = (p * p).sum()
        ad.backward(tape, loss)
        with pytest.raises(StaleTape):
            ad.backward(tape, loss)

    def test_reentering_consumed_tape_raises(self):
        p = ad.param(np.ones(2).reshape(1, 2))
        with ad.Tape() as tape:
            loss = p.sum()
        ad.backward(tape, loss)
        with pytest.raises(StaleTape):
            with tape:
                pass

    def test_tape_reentry_before_backward_allowed(self):
        p = ad.param(np.ones(2).reshape(1, 2))
        tape = ad.Tape()
        with tape:
            y = p * 2.0
        with tape:
            loss = y.sum()
        g = ad.backward(tape, loss)[id(p)]
        np.testing.assert_allclose(g, np.full((1, 2), 2.0))

    def test_frozen_leaf_gets_no_entry(self):
        frozen = ad.constant(np.ones(3).reshape(1, 3))
        live = ad.param(np.ones(3).reshape(1, 3))
        with ad.Tape() as tape:
            loss = (frozen * live).sum()
        grads = ad.backward(tape, loss)
        assert id(live) in grads
        assert id(frozen) not in grads

    def test_no_recording_without_active_tape(self):
        p = ad.param(np.ones(4).reshape(2, 2))
        tape = ad.Tape()
        with tape:
            pass
        y = (p * p).sum()  # outside: computes the value, records nothing
        assert float(y.value) == 4.0
        assert len(tape) == 0

    def test_non_scalar_root_rejected(self):
        p = ad.param(np.ones((2, 2)))
        with ad.Tape() as tape:
            y = p * 2.0
        with pytest.raises(DegenerateInput):
            ad.backward(tape, y)
