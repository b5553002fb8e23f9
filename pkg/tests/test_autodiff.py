"""Tensor ops, tape differentiation and the finite-difference checker."""

import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from prunevis import autodiff as ad
from prunevis.autodiff import ContractError, NumericError, ShapeError, Tape, Tensor


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestTensor:
    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            Tensor([1.0, float("nan")])
        with pytest.raises(NumericError):
            Tensor([float("inf")])

    def test_data_is_read_only(self):
        t = Tensor(np.ones(3))
        with pytest.raises(ValueError):
            t.data[0] = 2.0

    def test_float64(self):
        assert Tensor([1, 2]).data.dtype == np.float64

    def test_op_producing_inf_raises(self):
        with np.errstate(over="ignore"), pytest.raises(NumericError):
            ad.mul(Tensor([1e200]), Tensor([1e200]))


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_permutation_zero(self):
        out = ad.matmul(Tensor([[1, 0], [0, 0]]), Tensor([[0, 1], [1, 0]]))
        np.testing.assert_array_equal(out.data, [[0, 1], [0, 0]])

    def test_random_vs_triple_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        out = ad.matmul(Tensor(a), Tensor(b)).data
        assert np.abs(out - naive_matmul(a, b)).max() < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(4)
        a, b = rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((2, 3, 5, 2))
        out = ad.matmul(Tensor(a), Tensor(b)).data
        for i in range(2):
            for j in range(3):
                assert np.abs(out[i, j] - naive_matmul(a[i, j], b[i, j])).max() < 1e-12

    def test_recorded_only_when_needed(self):
        with Tape() as tape:
            ad.matmul(Tensor(np.eye(2)), Tensor(np.eye(2)))
            assert tape.records == []
            ad.matmul(Tensor(np.eye(2), requires_grad=True), Tensor(np.eye(2)))
        assert len(tape.records) == 1


class TestSoftmax:
    def test_symmetric_row(self):
        out = ad.masked_row_softmax(Tensor([[0.0, 0.0]]))
        np.testing.assert_array_equal(out.data, [[0.5, 0.5]])

    def test_single_admissible(self):
        out = ad.masked_row_softmax(Tensor([[3.0, 7.0]]), np.array([[True, False]]))
        np.testing.assert_array_equal(out.data, [[1.0, 0.0]])

    def test_direct_formula(self):
        out = ad.masked_row_softmax(Tensor([[1.0, 2.0, 3.0]])).data[0]
        e = np.array([math.exp(1), math.exp(2), math.exp(3)])
        assert np.abs(out - e / e.sum()).max() < 1e-12

    def test_fully_masked_row(self):
        mask = np.array([[True, False], [False, False]])
        with pytest.raises(ContractError):
            ad.masked_row_softmax(Tensor(np.zeros((2, 2))), mask)

    def test_large_scores_stable(self):
        out = ad.masked_row_softmax(Tensor([[1000.0, 1001.0]])).data
        assert np.isfinite(out).all()
        assert abs(out.sum() - 1.0) < 1e-12

    def test_rows_sum_to_one_1000_trials(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            q = int(rng.integers(1, 12))
            x = rng.normal(0, 5, size=(q, q))
            y = ad.masked_row_softmax(Tensor(x), ad.causal_mask(q)).data
            assert np.abs(y.sum(axis=1) - 1.0).max() <= 1e-12
            assert (y >= 0).all()
            assert (y[~ad.causal_mask(q)] == 0.0).all()

    def test_causal_mask_shape(self):
        m = ad.causal_mask(3)
        np.testing.assert_array_equal(m, np.tri(3, dtype=bool))


class TestBackward:
    def test_sum_gives_ones(self):
        with Tape() as tape:
            x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
            loss = ad.total(x)
        np.testing.assert_array_equal(ad.backward(tape, loss)[x.id], np.ones((2, 3)))

    def test_sum_of_squares(self):
        x0 = np.array([1.5, -2.0, 0.25])
        with Tape() as tape:
            x = Tensor(x0, requires_grad=True)
            loss = ad.total(ad.mul(x, x))
        np.testing.assert_allclose(ad.backward(tape, loss)[x.id], 2 * x0, rtol=0, atol=1e-15)

    def test_non_scalar_loss(self):
        with Tape() as tape:
            x = Tensor(np.ones(3), requires_grad=True)
            y = ad.mul(x, x)
        with pytest.raises(ContractError):
            ad.backward(tape, y)

    def test_fan_out_accumulates(self):
        with Tape() as tape:
            x = Tensor([2.0], requires_grad=True)
            loss = ad.total(ad.add(ad.mul(x, x), ad.scale(x, 3.0)))
        np.testing.assert_allclose(ad.backward(tape, loss)[x.id], [7.0])

    def test_captured_node_always_reported(self):
        with Tape() as tape:
            x = Tensor(np.ones(2), requires_grad=True)
            unused = tape.capture("side", ad.scale(x, 2.0))
            loss = ad.total(x)
        grads = ad.backward(tape, loss)
        np.testing.assert_array_equal(grads[unused.id], np.zeros(2))

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        w0, x0 = rng.standard_normal((4, 3)), rng.standard_normal((2, 4))

        def run():
            with Tape() as tape:
                w = Tensor(w0, requires_grad=True)
                h = ad.gelu(ad.matmul(Tensor(x0), w))
                loss = ad.cross_entropy(h, [0, 2])
            return ad.backward(tape, loss)[w.id]

        assert run().tobytes() == run().tobytes()


class TestGradCheck:
    def test_identity(self):
        assert ad.grad_check(lambda t: t, np.random.default_rng(0).standard_normal(5)) < 1e-10

    def test_softmax(self):
        pt = np.random.default_rng(1).standard_normal((4, 4))
        assert ad.grad_check(lambda t: ad.masked_row_softmax(t, ad.causal_mask(4)), pt) < 1e-6

    def test_layer_norm(self):
        rng = np.random.default_rng(2)
        g, b = Tensor(rng.standard_normal(5)), Tensor(rng.standard_normal(5))
        assert ad.grad_check(lambda t: ad.layer_norm(t, g, b), rng.standard_normal((3, 5))) < 1e-6

    def test_non_finite_evaluation(self):
        def f(t):
            if abs(t.data[0]) < 0.5:
                raise NumericError("boom")
            return t
        with pytest.raises(NumericError):
            ad.grad_check(f, np.array([1.0]), eps=0.6)


UNARY_OPS = {
    "tanh": ad.tanh,
    "gelu": ad.gelu,
    "softmax": lambda t: ad.masked_row_softmax(t, ad.causal_mask(t.shape[-1])),
    "layer_norm": lambda t: ad.layer_norm(t, Tensor(np.linspace(0.5, 1.5, t.shape[-1])),
                                          Tensor(np.linspace(-0.2, 0.2, t.shape[-1]))),
    "scale": lambda t: ad.scale(t, -1.7),
    "mean": ad.mean,
    "total": ad.total,
    "reshape": lambda t: ad.reshape(t, (-1,)),
    "transpose": lambda t: ad.transpose(t, (1, 0)),
    "take": lambda t: ad.take(t, [2, 0, 0], axis=1),
    "cross_entropy": lambda t: ad.cross_entropy(t, [1, 0, 3, 2]),
    "mul_self": lambda t: ad.mul(t, t),
    "matmul_left": lambda t: ad.matmul(t, Tensor(np.linspace(-1, 1, 12).reshape(4, 3))),
    "matmul_right": lambda t: ad.matmul(Tensor(np.linspace(-1, 1, 12).reshape(3, 4)), t),
    "add_bias": lambda t: ad.add(t, Tensor(np.arange(4.0))),
    "sub_bias": lambda t: ad.sub(Tensor(np.arange(4.0)), t),
    "concat": lambda t: ad.concat([t, ad.scale(t, 2.0)], axis=0),
    "embedding": lambda t: ad.embedding(t, [[0, 3], [3, 1]]),
    "take_rows": lambda t: ad.take_rows(ad.reshape(t, (2, 2, 4)), [1, 0]),
}


class TestOpGradients:
    @pytest.mark.parametrize("name", sorted(UNARY_OPS))
    def test_100_random_points(self, name):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        f = UNARY_OPS[name]
        worst = 0.0
        for _ in range(100):
            pt = rng.normal(0, 1.0, size=(4, 4))
            worst = max(worst, ad.grad_check(f, pt, eps=1e-5))
        assert worst < 1e-6, worst

    def test_bias_broadcast_gradient(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((3, 4)))
        assert ad.grad_check(lambda b: ad.add(x, b), rng.standard_normal(4)) < 1e-6
        assert ad.grad_check(lambda b: ad.mul(x, b), rng.standard_normal(4)) < 1e-6


class TestEmbedding:
    def test_out_of_range_id(self):
        with pytest.raises(ContractError):
            ad.embedding(Tensor(np.zeros((4, 2))), [4])

    def test_repeated_ids_accumulate(self):
        with Tape() as tape:
            table = Tensor(np.zeros((3, 2)), requires_grad=True)
            loss = ad.total(ad.embedding(table, [1, 1, 2]))
        np.testing.assert_array_equal(ad.backward(tape, loss)[table.id], [[0, 0], [2, 2], [1, 1]])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_property_rows_are_distributions(x):
    q, k = x.shape
    mask = ad.causal_mask(q, k) if k >= q else np.ones((q, k), bool)
    y = ad.masked_row_softmax(Tensor(x), mask).data
    assert (y >= 0).all()
    assert np.abs(y.sum(axis=1) - 1).max() <= 1e-12
    assert (y[~mask] == 0).all()


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 6)),
              elements=st.floats(-20, 20, allow_nan=False)))
def test_layer_norm_property_zero_mean_unit_var(x):
    d = x.shape[1]
    y = ad.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
    assert np.abs(y.mean(axis=1)).max() < 1e-9
    var = x.var(axis=1)
    ok = var > 1e-3
    np.testing.assert_allclose(y[ok].var(axis=1), var[ok] / (var[ok] + 1e-5), rtol=1e-9)
