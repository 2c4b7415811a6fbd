import numpy as np
import pytest

from relconv.gradcheck import check_gradients, grad_check
from relconv.tensor import Tensor


def test_exact_for_polynomial(rng):
    x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    assert grad_check(lambda x: (x ** 3).sum(), [x]) < 1e-8


def test_detects_a_wrong_backward(rng):
    x = Tensor(rng.normal(size=4), requires_grad=True)

    def buggy(x):
        out = Tensor._result((x.data ** 2).sum(), [x], lambda g: [g * 2.02 * x.data])
        return out

    assert grad_check(buggy, [x]) > 1e-3


def test_rejects_non_scalar(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    with pytest.raises(ValueError):
        check_gradients(lambda x: x * 2.0, [x])


def test_requires_grad_inputs():
    with pytest.raises(ValueError):
        check_gradients(lambda x: x.sum(), [Tensor([1.0])])


def test_kink_coordinates_are_skipped():
    x = Tensor([1e-4, 0.5, -0.7], requires_grad=True)
    res = check_gradients(lambda x: x.relu().sum(), [x], skip_kinks=True)
    assert res.n_skipped == 1 and res.n_checked == 2 and res.max_rel_error < 1e-8


def test_subsampled_coordinates(rng):
    x = Tensor(rng.normal(size=100), requires_grad=True)
    res = check_gradients(lambda x: (x * x).sum(), [x], max_coords=10, rng=rng)
    assert res.n_checked == 10
