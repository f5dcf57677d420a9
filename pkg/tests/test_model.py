import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gtfnmf.exceptions import ConfigurationError
from gtfnmf.model import (ModelSpec, amplitude, channel_power, measurement_jacobian, measurement_mean,
                          sample_generative, softplus, softplus_grad, softplus_inv)


def one_by_one(W=1.0, **kw):
    return ModelSpec.from_arrays([0.5], 0.001, 1.0, 0.01, 1.0, [[W]], 0.01, **kw)


def state(spec, z, g):
    lay = spec.state_space().layout
    return np.asarray(z, float) @ lay.Hz + np.asarray(g, float) @ lay.Hg


def test_softplus_values():
    assert softplus(0.0) == pytest.approx(0.693147, abs=1e-6)
    assert softplus(50.0) == pytest.approx(50.0, rel=1e-15)
    assert softplus(-50.0) == pytest.approx(1.93e-22, rel=1e-2)
    assert np.isfinite(softplus(1e4)) and softplus(-1e4) >= 0


def test_softplus_grad_and_inverse():
    g = np.linspace(-30, 30, 121)
    h = 1e-6
    np.testing.assert_allclose(softplus_grad(g), (softplus(g + h) - softplus(g - h)) / (2 * h), atol=1e-8)
    np.testing.assert_allclose(softplus_inv(softplus(np.linspace(-10, 30, 41))), np.linspace(-10, 30, 41), atol=1e-8)
    assert float(softplus_inv(math.log(2))) == pytest.approx(0.0, abs=1e-12)
    assert float(softplus_inv(1.0)) == pytest.approx(0.5413, abs=1e-4)


def test_amplitude_examples():
    assert amplitude([0.0, 0.0], np.zeros((1, 2)), 0) == 0.0
    assert amplitude([0.0], [[1.0]], 0) == pytest.approx(0.832555, abs=1e-6)
    assert amplitude([0.0, 0.0], [[2.0, 3.0]], 0) == pytest.approx(1.861, abs=1e-3)
    with pytest.raises(ConfigurationError):
        amplitude([0.0], [[1.0]], 1)


def test_measurement_mean_examples():
    spec = one_by_one()
    assert measurement_mean(state(spec, [0.0], [0.3]), spec) == 0.0
    assert measurement_mean(state(spec, [1.0], [0.0]), spec) == pytest.approx(0.832555, abs=1e-6)


def test_unit_amplitude_regime_is_linear_sum():
    W = np.full((3, 1), 1.0 / math.log(2))
    spec = ModelSpec.from_arrays([0.3, 0.9, 1.5], 0.001, 1.0, 0.01, 1.0, W, 0.01)
    z = np.array([0.4, -1.2, 2.0])
    assert measurement_mean(state(spec, z, [0.0]), spec) == pytest.approx(z.sum(), abs=1e-12)


def test_measurement_jacobian_examples():
    spec = one_by_one()
    lay = spec.state_space().layout
    J = measurement_jacobian(state(spec, [1.0], [0.0]), spec)
    assert J @ lay.Hz[0] == pytest.approx(0.832555, abs=1e-6)
    assert J @ lay.Hg[0] == pytest.approx(0.5 / (2 * math.sqrt(math.log(2))), abs=1e-12)
    assert J @ lay.Hg[0] == pytest.approx(0.300282, abs=2.5e-6)
    zero = one_by_one(W=0.0)
    np.testing.assert_array_equal(measurement_jacobian(state(zero, [1.0], [0.0]), zero), 0.0)


def test_layout_mismatch():
    spec = one_by_one()
    with pytest.raises(ConfigurationError):
        measurement_mean(np.zeros(spec.state_space().dim + 1), spec)


def test_jacobian_matches_finite_differences_at_100_states():
    rng = np.random.default_rng(5)
    spec = ModelSpec.from_arrays([0.4, 1.0, 2.2], 0.002, 1.0, 0.02, 1.0, rng.uniform(0.1, 2.0, (3, 2)), 0.01)
    M = spec.state_space().dim
    h = 1e-6
    worst = 0.0
    for _ in range(100):
        x = rng.normal(size=M) * 2
        J = measurement_jacobian(x, spec)
        E = np.eye(M) * h
        fd = (measurement_mean(x + E, spec) - measurement_mean(x - E, spec)) / (2 * h)
        worst = max(worst, np.max(np.abs(J - fd)) / max(1.0, np.max(np.abs(fd))))
    assert worst < 1e-5


@given(st.floats(0.0, 10.0), st.lists(st.floats(-20, 20), min_size=2, max_size=2))
def test_power_linear_in_weights(alpha, g):
    W = np.array([[0.3, 1.2], [2.0, 0.1]])
    np.testing.assert_allclose(channel_power(np.array(g), alpha * W), alpha * channel_power(np.array(g), W),
                               rtol=1e-12, atol=1e-300)


def test_sample_noiseless_and_deterministic():
    spec = ModelSpec.from_arrays([0.3, 1.1], 0.002, 1.0, 0.02, 1.0, [[0.5, 1.0], [1.0, 0.2]], 0.0)
    s = sample_generative(spec, 500, seed=3)
    a = np.sqrt(channel_power(s.G.T, spec.W))
    np.testing.assert_allclose(s.y, np.sum(a * s.Z.T, axis=1), atol=1e-13)
    s2 = sample_generative(spec.with_noise(0.1), 500, seed=3)
    s3 = sample_generative(spec.with_noise(0.1), 500, seed=3)
    np.testing.assert_array_equal(s2.y, s3.y)
    assert s.Z.shape == (2, 500) and s.G.shape == (2, 500)


def test_sample_requires_positive_length():
    with pytest.raises(ConfigurationError):
        sample_generative(one_by_one(), 0)


def test_long_run_stationary_statistics():
    # dt = 1 so lengthscales are in samples and the chain mixes quickly
    spec = ModelSpec.from_arrays([0.7, 2.0], [3.0, 5.0], [1.5, 0.6], 4.0, 1.0, np.ones((2, 1)), 0.01, dt=1.0)
    T = 100_000
    s = sample_generative(spec, T, seed=11)
    for d, k in enumerate(spec.subband_kernels):
        z = s.Z[d]
        assert np.var(z) == pytest.approx(k.variance, rel=0.05)
        lags = np.arange(21)
        emp = np.array([np.mean(z[: T - t] * z[t:]) for t in lags])
        # standard errors from 50 batch means of the lag products
        se = np.array([np.std(np.mean((z[: T - t] * z[t:])[: (T - 20) // 50 * 50].reshape(50, -1), axis=1))
                       / np.sqrt(50) for t in lags])
        assert np.all(np.abs(emp - k.analytic(lags)) < 3 * se + 1e-12), (d, emp - k.analytic(lags), se)
