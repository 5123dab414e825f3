import numpy as np
import pytest

from shufflemixer.nn import Parameter
from shufflemixer.optim import Adam


def _param(value, grad):
    p = Parameter(np.array(value, dtype=np.float64))
    p.grad = np.array(grad, dtype=np.float64)
    return p


def test_first_step_moves_by_learning_rate():
    p = _param([1.0], [1.0])
    Adam([p], lr=0.0005).step()
    assert p.data[0] == pytest.approx(0.9995, abs=1e-9)


def test_zero_gradient_leaves_parameter_unchanged():
    p = _param([0.3, -2.0], [0.0, 0.0])
    Adam([p]).step()
    np.testing.assert_array_equal(p.data, [0.3, -2.0])


def test_identical_parameters_stay_identical():
    a, b = _param([0.7, 1.1], [0.2, -3.0]), _param([0.7, 1.1], [0.2, -3.0])
    opt = Adam([a, b])
    for _ in range(5):
        a.grad = np.array([0.2, -3.0])
        b.grad = np.array([0.2, -3.0])
        opt.step()
    np.testing.assert_array_equal(a.data, b.data)


def test_matches_reference_recursion():
    rng = np.random.default_rng(0)
    grads = rng.standard_normal((4, 3))
    p = _param(np.zeros(3), grads[0])
    opt = Adam([p], lr=0.01)
    m = v = np.zeros(3)
    x = np.zeros(3)
    for t, g in enumerate(grads, 1):
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, x, rtol=1e-12)


def test_step_clears_gradients():
    p = _param([1.0], [1.0])
    Adam([p]).step()
    assert p.grad is None


def test_missing_gradient_is_an_error():
    p = Parameter(np.zeros(2))
    with pytest.raises(ValueError, match="no gradient"):
        Adam([p]).step()
