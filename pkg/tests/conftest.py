import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def finite_diff_param_grad(forward_fn, params_values, h=1e-5):
    """Central finite differences of a scalar-valued forward w.r.t. params."""
    grad = np.zeros_like(params_values)
    for i in range(len(params_values)):
        params_values[i] += h
        fp = forward_fn()
        params_values[i] -= 2 * h
        fm = forward_fn()
        params_values[i] += h
        grad[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(1e-3, np.abs(b))
