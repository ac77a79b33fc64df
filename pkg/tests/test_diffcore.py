import numpy as np
import pytest

from conftest import finite_diff_param_grad, rel_err
from s2qlab import diffcore as dc
from s2qlab.errors import ConfigError, NumericalError

FD_FAMILIES = [
    dc.ApproximatorSpec((4, 8, 3), activation="relu"),
    dc.ApproximatorSpec((3, 6, 6, 2), activation="elu"),
    dc.ApproximatorSpec((5, 7, 1), activation="tanh"),
    dc.ApproximatorSpec((3, 5, 2), activation="elu", weight_transform="absolute"),
    dc.ApproximatorSpec((2, 2), activation="identity"),
]


def test_identity_layer_passthrough():
    spec = dc.ApproximatorSpec((2, 2), activation="identity")
    params = dc.zeros_params(spec)
    params.values[:4] = np.eye(2).ravel()
    assert np.allclose(dc.forward(spec, params, [1.0, 2.0]), [1.0, 2.0])


def test_absolute_transform_flips_negative_weight():
    spec = dc.ApproximatorSpec((1, 1), weight_transform="absolute")
    params = dc.zeros_params(spec)
    params.values[0] = -0.5
    assert dc.forward(spec, params, [2.0]) == pytest.approx([1.0])


def test_forward_matches_straight_line_reimplementation():
    spec = dc.ApproximatorSpec((3, 8, 2), activation="relu")
    rng = np.random.default_rng(7)
    params = dc.init_params(spec, rng)
    x = rng.normal(size=3)
    w1 = params.values[:24].reshape(3, 8)
    b1 = params.values[24:32]
    w2 = params.values[32:48].reshape(8, 2)
    b2 = params.values[48:50]
    expected = np.maximum(x @ w1 + b1, 0.0) @ w2 + b2
    assert np.allclose(dc.forward(spec, params, x), expected, atol=1e-12)


def test_forward_dimension_mismatch():
    spec = dc.ApproximatorSpec((3, 2))
    params = dc.zeros_params(spec)
    with pytest.raises(ConfigError):
        dc.forward(spec, params, np.zeros(4))


def test_backward_linear_map():
    spec = dc.ApproximatorSpec((1, 1))
    params = dc.zeros_params(spec)
    params.values[0] = 2.0
    grad = dc.backward(spec, params, [3.0], [1.0])
    assert grad[0] == pytest.approx(3.0)   # d(w*x)/dw = x
    assert grad[1] == pytest.approx(1.0)   # bias


def test_zero_upstream_gives_zero_grad(rng):
    spec = FD_FAMILIES[1]
    params = dc.init_params(spec, rng)
    grad = dc.backward(spec, params, rng.normal(size=3), np.zeros(2))
    assert np.all(grad == 0.0)


@pytest.mark.parametrize("spec", FD_FAMILIES, ids=lambda s: f"{s.layer_widths}-{s.activation}-{s.weight_transform[0]}")
def test_gradient_matches_finite_differences(spec):
    rng = np.random.default_rng(42)
    for _ in range(10):
        params = dc.init_params(spec, rng)
        x = rng.normal(size=spec.in_dim)
        upstream = rng.normal(size=spec.out_dim)
        grad = dc.backward(spec, params, x, upstream)

        def scalar():
            return float(dc.forward(spec, params, x) @ upstream)

        fd = finite_diff_param_grad(scalar, params.values)
        assert rel_err(grad, fd).max() <= 1e-4


def test_absolute_network_is_monotone(rng):
    spec = dc.ApproximatorSpec((3, 6, 2), activation="elu",
                               weight_transform="absolute")
    params = dc.init_params(spec, rng)
    for _ in range(100):
        x = rng.normal(size=3)
        i = rng.integers(0, 3)
        y0 = dc.forward(spec, params, x)
        x2 = x.copy()
        x2[i] += 1e-3
        y1 = dc.forward(spec, params, x2)
        assert np.all(y1 - y0 >= -1e-12)


def test_adam_zero_grad_keeps_values():
    spec = dc.ApproximatorSpec((2, 2))
    params = dc.init_params(spec, np.random.default_rng(0))
    before = params.values.copy()
    dc.adam_step(params, np.zeros_like(before), dc.AdamConfig())
    assert np.array_equal(params.values, before)
    assert params.step_count == 1


def test_adam_single_step_bias_corrected():
    params = dc.ParamStore(np.zeros(1))
    cfg = dc.AdamConfig(learning_rate=0.001, beta1=0.9, beta2=0.999, epsilon=1e-5)
    dc.adam_step(params, np.array([1.0]), cfg)
    assert params.values[0] == pytest.approx(-0.001, abs=1e-6)


def test_adam_clips_by_global_norm():
    n = 4
    grad = np.full(n, 50.0)  # norm 100
    cfg = dc.AdamConfig(grad_clip_norm=10.0)
    clipped = dc.ParamStore(np.zeros(n))
    dc.adam_step(clipped, grad, cfg)
    manual = dc.ParamStore(np.zeros(n))
    dc.adam_step(manual, grad * 0.1, dc.AdamConfig(grad_clip_norm=1e9))
    assert np.allclose(clipped.values, manual.values, atol=1e-15)


def test_adam_rejects_non_finite():
    params = dc.ParamStore(np.zeros(2))
    with pytest.raises(NumericalError):
        dc.adam_step(params, np.array([np.nan, 0.0]), dc.AdamConfig())
    assert params.step_count == 0
    assert np.all(params.values == 0.0)


def test_init_is_deterministic_and_moments_zero():
    spec = dc.ApproximatorSpec((4, 5, 3))
    a = dc.init_params(spec, np.random.default_rng(9))
    b = dc.init_params(spec, np.random.default_rng(9))
    assert np.array_equal(a.values, b.values)
    assert np.all(a.adam_m == 0.0) and np.all(a.adam_v == 0.0)
    assert a.step_count == 0


def test_parameter_trajectory_bit_identical():
    spec = dc.ApproximatorSpec((3, 4, 2), activation="relu")
    cfg = dc.AdamConfig()

    def trajectory():
        rng = np.random.default_rng(5)
        params = dc.init_params(spec, rng)
        for _ in range(20):
            x = rng.normal(size=3)
            up = rng.normal(size=2)
            grad = dc.backward(spec, params, x, up)
            dc.adam_step(params, grad, cfg)
        return params.values

    assert np.array_equal(trajectory(), trajectory())


def test_spec_validation():
    with pytest.raises(ConfigError):
        dc.ApproximatorSpec((3,))
    with pytest.raises(ConfigError):
        dc.ApproximatorSpec((3, 0))
    with pytest.raises(ConfigError):
        dc.ApproximatorSpec((3, 2), activation="gelu")
    with pytest.raises(ConfigError):
        dc.ApproximatorSpec((3, 2), weight_transform="clip")
    with pytest.raises(ConfigError):
        dc.AdamConfig(beta1=1.5)
