import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmcosine import autodiff as ad
from mmcosine.autodiff import (
    OpKind,
    Tensor,
    apply,
    backward,
    finite_diff_gradient,
    max_relative_error,
)


def leaf(values):
    return Tensor(values, requires_grad=True)


class TestForward:
    def test_matmul(self):
        out = apply(OpKind.MATMUL, [Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]])])
        np.testing.assert_array_equal(out.values, [[3], [7]])

    def test_l2_normalize_345(self):
        out = apply(OpKind.L2_NORMALIZE_ROWS, [Tensor([[3, 4]])], {"eps": 0.0})
        np.testing.assert_allclose(out.values, [[0.6, 0.8]], rtol=0, atol=1e-15)

    def test_concat(self):
        out = apply(OpKind.CONCAT, [Tensor([[1, 2]]), Tensor([[3]])])
        np.testing.assert_array_equal(out.values, [[1, 2, 3]])

    def test_zero_row_uses_eps_floor(self):
        out = ad.l2_normalize_rows(Tensor([[0.0, 0.0], [3.0, 4.0]]))
        assert np.all(np.isfinite(out.values))
        np.testing.assert_array_equal(out.values[0], [0.0, 0.0])

    def test_bias_row_broadcast(self):
        out = ad.add(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([10.0, 20.0]))
        np.testing.assert_array_equal(out.values, [[11, 22], [13, 24]])

    def test_sigmoid_is_stable_for_large_inputs(self):
        out = ad.sigmoid(Tensor([[-800.0, 0.0, 800.0]]))
        np.testing.assert_array_equal(out.values, [[0.0, 0.5, 1.0]])

    @pytest.mark.parametrize("n", [2, 3, 7, 60])
    def test_uniform_logits_cross_entropy_is_log_n(self, n):
        loss = ad.softmax_cross_entropy(Tensor(np.zeros((4, n))), [0, 1, 0, 1])
        assert abs(loss.item() - math.log(n)) < 1e-12

    def test_no_record_without_grad(self):
        out = ad.matmul(Tensor(np.eye(2)), Tensor(np.eye(2)))
        assert out.is_leaf and not out.requires_grad

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((4, 8)), rng.standard_normal((8, 3))
        x = ad.l2_normalize_rows(ad.matmul(Tensor(a), Tensor(b))).values
        y = ad.l2_normalize_rows(ad.matmul(Tensor(a), Tensor(b))).values
        assert x.tobytes() == y.tobytes()


class TestErrors:
    def test_shape_mismatch_names_op_and_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"MatMul.*\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_add_only_broadcasts_bias_rows(self):
        with pytest.raises(ad.ShapeError, match="Add"):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))

    def test_backward_needs_scalar(self):
        x = leaf([[1.0, 2.0]])
        with pytest.raises(ad.ShapeError):
            backward(ad.scale(x, 2.0))

    def test_second_backward_fails(self):
        x = leaf([[1.0, 2.0]])
        loss = ad.total(ad.mul(x, x))
        backward(loss)
        with pytest.raises(ad.TapeError):
            backward(loss)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            ad.softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])


class TestBackward:
    def test_product_rule(self):
        x, y = leaf([[2.0]]), leaf([[3.0]])
        backward(ad.total(ad.mul(x, y)))
        assert x.grad[0, 0] == 3.0 and y.grad[0, 0] == 2.0

    def test_softmax_gradient_is_probs_minus_onehot(self):
        f = leaf([[0.0, 0.0]])
        backward(ad.softmax_cross_entropy(f, [0]))
        np.testing.assert_array_equal(f.grad, [[-0.5, 0.5]])

    def test_l2_normalize_matches_finite_differences(self):
        point = Tensor([[3.0, 4.0]])
        weights = np.array([[0.3, -1.7]])

        def f(t):
            return float(np.sum(ad.l2_normalize_rows(t).values * weights))

        x = leaf(point.values)
        backward(ad.total(ad.mul(ad.l2_normalize_rows(x), Tensor(weights))))
        fd = finite_diff_gradient(f, point, 1e-5)
        assert max_relative_error(x.grad, fd.values, atol=0) < 1e-6

    def test_shared_leaf_accumulates(self):
        x = leaf([[1.5, -2.0]])
        backward(ad.total(ad.add(ad.mul(x, x), x)))
        np.testing.assert_allclose(x.grad, 2 * x.values + 1)

    def test_tapes_from_separate_passes_merge(self):
        x, y = leaf([[1.0]]), leaf([[2.0]])
        a = ad.scale(x, 3.0)
        b = ad.scale(y, 5.0)
        assert a._tape is not b._tape
        backward(ad.total(ad.add(a, b)))
        assert x.grad[0, 0] == 3.0 and y.grad[0, 0] == 5.0

    def test_intermediate_gradients_are_exposed(self):
        w = leaf([[1.0, -1.0], [0.5, 2.0]])
        logits = ad.matmul(Tensor([[1.0, 2.0]]), w)
        backward(ad.softmax_cross_entropy(logits, [1]))
        p = np.exp(logits.values) / np.exp(logits.values).sum()
        np.testing.assert_allclose(logits.grad, p - [[0, 1]], atol=1e-15)


class TestFiniteDiff:
    def test_quadratic_is_exact(self):
        g = finite_diff_gradient(lambda t: float(t.values[0] ** 2), Tensor([3.0]), 1e-5)
        assert abs(g.values[0] - 6.0) < 1e-9

    def test_constant_gives_zero(self):
        g = finite_diff_gradient(lambda t: 4.2, Tensor(np.ones((2, 3))), 1e-5)
        np.testing.assert_array_equal(g.values, np.zeros((2, 3)))

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ValueError):
            finite_diff_gradient(lambda t: 0.0, Tensor([1.0]), 0.0)

    def test_reports_non_finite_coordinate(self):
        def f(t):
            return float("inf") if t.values[1] > 0.5 else 0.0

        with pytest.raises(FloatingPointError, match=r"\(1,\)"):
            finite_diff_gradient(f, Tensor([0.0, 0.5]), 1e-3)


# gradient check of every op kind on random small shapes ---------------------

def _build(kind, rng, rows, cols):
    """Inputs and a forward closure producing a scalar for one op kind."""
    if kind is OpKind.MATMUL:
        inner = int(rng.integers(1, 5))
        xs = [rng.standard_normal((rows, inner)), rng.standard_normal((inner, cols))]
    elif kind is OpKind.ADD:
        xs = [rng.standard_normal((rows, cols)), rng.standard_normal(cols)]
    elif kind is OpKind.CONCAT:
        xs = [rng.standard_normal((rows, cols)), rng.standard_normal((rows, 2))]
    elif kind in (OpKind.MUL,):
        xs = [rng.standard_normal((rows, cols)), rng.standard_normal((rows, cols))]
    elif kind is OpKind.RELU:
        # keep away from the kink
        x = rng.standard_normal((rows, cols))
        xs = [np.where(np.abs(x) < 0.05, 0.3, x)]
    else:
        xs = [rng.standard_normal((rows, cols))]
    labels = rng.integers(0, cols, size=rows)
    attrs = {OpKind.L2_NORMALIZE_ROWS: {"eps": 1e-12}, OpKind.SCALE: {"factor": -1.7},
             OpKind.SOFTMAX_CE: {"labels": labels}}.get(kind, {})

    def run(tensors):
        out = apply(kind, tensors, attrs)
        if out.values.ndim == 0:
            return out
        probe = Tensor(np.cos(np.arange(out.values.size)).reshape(out.shape))
        return ad.total(ad.mul(out, probe))

    return xs, run


ALL_KINDS = list(OpKind)


@pytest.mark.parametrize("kind", ALL_KINDS, ids=lambda k: k.value)
@settings(max_examples=15, deadline=None)
@given(rows=st.integers(1, 4), cols=st.integers(1, 8), seed=st.integers(0, 2**32 - 1))
def test_every_op_matches_finite_differences(kind, rows, cols, seed):
    rng = np.random.default_rng(seed)
    xs, run = _build(kind, rng, rows, cols)
    leaves = [leaf(x) for x in xs]
    backward(run(leaves))
    for i, x in enumerate(xs):
        def f(t, i=i):
            args = [Tensor(v) for v in xs]
            args[i] = t
            return run(args).item()

        fd = finite_diff_gradient(f, Tensor(x), 1e-5)
        assert max_relative_error(leaves[i].grad, fd.values, atol=1e-7) < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=8).filter(
    lambda v: math.sqrt(sum(x * x for x in v)) > 1e-6))
def test_normalized_rows_have_unit_norm(row):
    out = ad.l2_normalize_rows(Tensor([row]))
    assert abs(np.linalg.norm(out.values) - 1.0) < 1e-12
