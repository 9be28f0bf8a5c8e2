import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from agnostic_net.tensor import ShapeError, Tensor, finite_diff_grad, from_text, relative_error, to_text

from conftest import GRAD_TOL, max_grad_error


def leaf(values):
    return Tensor(np.array(values, dtype=float), requires_grad=True)


class TestForwardValues:
    def test_matmul_hand_example(self):
        out = Tensor([[1, 2], [3, 4]]) @ Tensor([[1], [1]])
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_mean(self):
        assert Tensor([2, 4, 6]).mean().item() == 4.0

    def test_max_and_sum_along_axis(self):
        x = Tensor([[1, 5], [7, 2]])
        np.testing.assert_array_equal(x.max(axis=1).data, [5, 7])
        np.testing.assert_array_equal(x.sum(axis=0).data, [8, 7])

    def test_storage_is_float64(self):
        assert Tensor([1, 2]).data.dtype == np.float64


class TestShapeErrors:
    def test_elementwise_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))

    def test_matmul_inner_dimension(self):
        with pytest.raises(ShapeError, match="matmul"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_only_leading_batch_broadcast(self):
        out = Tensor(np.ones((4, 3))) + Tensor(np.arange(3.0))
        assert out.shape == (4, 3)
        with pytest.raises(ShapeError):
            Tensor(np.ones((4, 3))) + Tensor(np.ones(4))

    def test_zero_extent_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((0, 3)))


class TestBackward:
    def test_sum_of_squares(self):
        x = leaf([1, 2, 3])
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2, 4, 6])

    def test_mean_gradient(self):
        x = leaf([1, 2, 3, 4])
        x.mean().backward()
        np.testing.assert_array_equal(x.grad, [0.25] * 4)

    @pytest.mark.parametrize("shape", [(3,), (2, 5), (2, 3, 4)])
    def test_sum_gradient_is_all_ones(self, shape):
        x = Tensor(np.random.default_rng(0).normal(size=shape), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones(shape))

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ShapeError):
            (leaf([1, 2]) * 2.0).backward()

    def test_two_passes_accumulate_exactly_twice(self):
        rng = np.random.default_rng(1)
        a, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        x1, x2 = Tensor(a, requires_grad=True), Tensor(a, requires_grad=True)
        (x1 @ Tensor(w)).max().backward()
        for _ in range(2):
            (x2 @ Tensor(w)).max().backward()
        np.testing.assert_array_equal(x2.grad, 2 * x1.grad)

    def test_shared_subexpression_visited_after_all_consumers(self):
        x = leaf([1.5, -0.5])
        y = x * x
        (y * y + y).sum().backward()  # d/dx (x^4 + x^2) = 4x^3 + 2x
        np.testing.assert_allclose(x.grad, 4 * x.data ** 3 + 2 * x.data, rtol=1e-15)

    def test_max_routes_to_first_argmax(self):
        x = leaf([[3, 3, 1]])
        x.max(axis=1).sum().backward()
        np.testing.assert_array_equal(x.grad, [[1, 0, 0]])

    def test_indexing_scatters_gradient(self):
        x = leaf([1, 2, 3, 4])
        x[1:3].sum().backward()
        np.testing.assert_array_equal(x.grad, [0, 1, 1, 0])

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(5)
            x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
            out = ((x @ x) * x).mean()
            out.backward()
            return out.data, x.grad
        (v1, g1), (v2, g2) = run(), run()
        assert v1.tobytes() == v2.tobytes() and g1.tobytes() == g2.tobytes()


@pytest.mark.parametrize("seed", range(10))
def test_random_composite_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(2,))

    def fn(t):
        x, w, bias = t
        h = (x @ w + bias) * (x @ w)
        return (h.reshape(6).max() + h.mean() - (x * x).sum(axis=1).mean())

    assert max_grad_error(fn, [a, b, c]) <= GRAD_TOL


class TestFiniteDifference:
    def test_square_at_three(self):
        g = finite_diff_grad(lambda t: (t * t).sum(), np.array([3.0]), 1e-5)
        assert abs(g.data[0] - 6.0) <= 1e-9

    def test_sum_gives_ones(self):
        g = finite_diff_grad(lambda t: t.sum(), np.random.default_rng(0).normal(size=(2, 3)))
        np.testing.assert_allclose(g.data, 1.0, atol=1e-9)

    def test_step_must_be_positive(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda t: t.sum(), np.ones(2), 0.0)

    def test_relative_error_floor(self):
        assert relative_error([0.0], [0.0]) == 0.0
        assert relative_error([1.0], [1.1]) == pytest.approx(0.1 / 1.1)
        assert relative_error([0.0], [1e-9]) == pytest.approx(0.1)


finite_arrays = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
                       elements=st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False))


@given(finite_arrays)
@settings(max_examples=50, deadline=None)
def test_text_round_trip_is_exact(values):
    back = from_text(to_text(Tensor(values)))
    assert back.shape == values.shape
    assert back.data.tobytes() == values.tobytes()


def test_text_format_header():
    assert to_text(Tensor([[1.0, 2.5]])) == "shape: 1 2\n1.0 2.5\n"
    with pytest.raises(ValueError):
        from_text("shape: 2 2\n1 2 3\n")


@given(finite_arrays)
@settings(max_examples=50, deadline=None)
def test_grad_shape_matches_data(values):
    x = Tensor(values, requires_grad=True)
    (x * x).mean().backward()
    assert x.grad.shape == x.data.shape
    assert np.all(np.isfinite(x.grad))
