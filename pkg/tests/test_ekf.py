import numpy as np
import pytest

from conftest import dense_gp, linear_spec, small_spec
from gtfnmf.ekf import iekf_smoother
from gtfnmf.exceptions import ConfigurationError
from gtfnmf.kalman import kalman_smoother
from gtfnmf.model import sample_generative


def test_linear_model_equals_kalman_smoother():
    spec = linear_spec(D=3)
    y = sample_generative(spec, 250, seed=8).y
    ss = spec.state_space()
    ks = kalman_smoother(ss.A, ss.Q, ss.P0, spec.amplitudes @ ss.layout.Hz, spec.noise_var, y)
    post = iekf_smoother(spec, y, 1)
    H = ss.layout.Hz
    np.testing.assert_allclose(post.z_mean, ks.means @ H.T, atol=1e-10)
    np.testing.assert_allclose(post.z_var, np.einsum("dm,tmn,dn->td", H, ks.covs, H), atol=1e-10)
    assert post.log_marginal == pytest.approx(ks.loglik, abs=1e-8)


def test_linear_loglik_matches_dense_gp():
    spec = linear_spec(D=2)
    y = sample_generative(spec, 200, seed=9).y
    assert iekf_smoother(spec, y, 1).log_marginal == pytest.approx(dense_gp(spec, y)[2], abs=1e-6)


def test_linear_iterations_are_a_fixed_point():
    spec = linear_spec(D=2)
    y = sample_generative(spec, 200, seed=10).y
    a, b = iekf_smoother(spec, y, 1), iekf_smoother(spec, y, 3)
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-10)
    np.testing.assert_allclose(a.var, b.var, atol=1e-10)


def test_gap_centre_is_more_uncertain():
    spec = small_spec(D=2, N=1)
    y = sample_generative(spec, 600, seed=3).y
    mask = np.ones(600, bool)
    mask[300:360] = False
    post = iekf_smoother(spec, y, 2, mask=mask)
    assert np.all(post.z_var[330] > post.z_var[298])
    assert np.all(post.z_var[330] > post.z_var[362])


def test_nonlinear_runs_and_is_finite():
    spec = small_spec(D=3, N=2)
    y = sample_generative(spec, 300, seed=4).y
    post = iekf_smoother(spec, y, 3)
    assert post.iterations == 3 and np.all(np.isfinite(post.mean)) and np.all(post.var >= 0)
    assert np.isfinite(post.log_marginal)


def test_iterations_validated():
    with pytest.raises(ConfigurationError):
        iekf_smoother(small_spec(), np.zeros(10), 0)
