import numpy as np
import pytest

import plat.autodiff as ad
from plat.autodiff import Tensor, grad_check, numerical_grad
from plat.errors import DimensionError, NumericError
from plat.gradsuite import op_cases


@pytest.mark.parametrize("name", sorted(op_cases()))
def test_op_gradients_match_finite_differences(name):
    f, inputs = op_cases()[name]
    rep = grad_check(f, inputs, step=1e-6, tol=1e-4)
    assert rep.passed, f"{name}: {rep}"


def test_grad_accumulates_over_shared_subexpressions():
    x = ad.parameter(np.array([1.0, 2.0, 3.0]))
    y = ad.sum_(ad.mul(x, x))
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_no_grad_builds_no_graph():
    x = ad.parameter(np.ones((2, 2)))
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad
    assert ad.grad_enabled()


def test_shape_errors_are_raised():
    a = ad.parameter(np.ones((2, 3)))
    with pytest.raises(DimensionError):
        ad.matmul(a, ad.parameter(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        ad.add(a, ad.parameter(np.ones((3, 2))))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_output_raises():
    with pytest.raises(NumericError):
        ad.exp(ad.parameter(np.array([1000.0])))


def test_minimum_tie_sends_gradient_to_first_argument():
    a = ad.parameter(np.array([1.0, 2.0]))
    b = ad.parameter(np.array([1.0, 0.0]))
    ad.sum_(ad.minimum(a, b)).backward()
    np.testing.assert_array_equal(a.grad, [1.0, 0.0])
    np.testing.assert_array_equal(b.grad, [0.0, 1.0])


def test_everything_is_float64():
    x = ad.parameter(np.ones((2, 2), dtype=np.float32))
    assert x.data.dtype == np.float64
    assert ad.softmax(x).data.dtype == np.float64


def test_cross_entropy_matches_manual():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(2, 3, 5))
    targets = np.array([[0, 1, 2], [3, 4, 0]])
    got = ad.cross_entropy(Tensor(logits), targets).data
    lse = np.log(np.exp(logits).sum(-1))
    want = lse - np.take_along_axis(logits, targets[..., None], -1)[..., 0]
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_numerical_grad_subset_leaves_other_entries_zero():
    x = ad.parameter(np.arange(6.0).reshape(2, 3))
    g = numerical_grad(lambda: ad.sum_(ad.mul(x, x)), x, indices=np.array([4]))
    assert g.reshape(-1)[4] == pytest.approx(8.0, rel=1e-8)
    assert np.count_nonzero(g) == 1


def test_grad_check_reports_a_wrong_gradient():
    x = ad.parameter(np.array([0.3, -0.7]))

    def bad(t):
        out = ad.sum_(ad.mul(t, t))
        # corrupt the backward pass: claims d/dx = x instead of 2x
        return Tensor(out.data, requires_grad=True, _parents=(t,), _backward=lambda g: ((t, g * t.data),), op="bad")

    rep = grad_check(bad, [x])
    assert not rep.passed
