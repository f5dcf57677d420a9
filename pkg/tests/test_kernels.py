import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gtfnmf.exceptions import ConfigurationError, ParameterError, StabilityError
from gtfnmf.kernels import (KernelSpec, MaternFamily, cosine_sde, discretize, kernel_covariance, kernel_sde,
                            matern_pinf_closed_form, matern_sde, solve_lyapunov, stack_model, subband_sde)

FAMILIES = list(MaternFamily)


def lyap_residual(sde):
    R = sde.F @ sde.Pinf + sde.Pinf @ sde.F.T + sde.L @ sde.Qc @ sde.L.T
    return np.linalg.norm(R)


def test_matern12_unit_closed_form():
    sde = matern_sde(KernelSpec("matern12", 1.0, 1.0))
    np.testing.assert_allclose(sde.F, [[-1.0]])
    np.testing.assert_allclose(sde.L, [[1.0]])
    np.testing.assert_allclose(sde.Qc, [[2.0]])
    np.testing.assert_allclose(sde.Pinf, [[1.0]], atol=1e-14)
    assert lyap_residual(sde) < 1e-12


@pytest.mark.parametrize("family,dim", [("matern12", 1), ("matern32", 2), ("matern52", 3)])
def test_matern_state_dimension(family, dim):
    sde = matern_sde(KernelSpec(family, 0.7, 2.5))
    assert sde.dim == dim
    np.testing.assert_array_equal(sde.h, np.eye(dim)[0])


def test_matern12_covariance_values():
    sde = matern_sde(KernelSpec("matern12", 2.0, 4.0))
    np.testing.assert_allclose(kernel_covariance(sde, [0, 1, 2]), 4 * np.exp(-np.array([0, 1, 2]) / 2), atol=1e-10)


def test_cosine_zero_frequency_is_zero_generator():
    np.testing.assert_array_equal(cosine_sde(0.0).F, np.zeros((2, 2)))


def test_cosine_quarter_turn_discretization():
    c = cosine_sde(math.pi / 2)
    A, _ = discretize(c.F, c.Pinf, 1.0)
    np.testing.assert_allclose(A, [[0, -1], [1, 0]], atol=1e-12)


def test_cosine_four_steps_is_half_turn():
    c = cosine_sde(math.pi / 4)
    A, _ = discretize(c.F, c.Pinf, 1.0)
    np.testing.assert_allclose(np.linalg.matrix_power(A, 4) @ [1, 0], [-1, 0], atol=1e-12)


@pytest.mark.parametrize("omega", [-0.1, math.pi + 0.01, float("nan")])
def test_cosine_rejects_out_of_range(omega):
    with pytest.raises(ParameterError):
        cosine_sde(omega)


@pytest.mark.parametrize("bad", [dict(lengthscale=0.0), dict(lengthscale=-1.0), dict(variance=0.0),
                                 dict(variance=float("inf")), dict(cosine_freq=4.0)])
def test_kernel_spec_rejects_invalid(bad):
    kw = dict(family="matern32", lengthscale=1.0, variance=1.0)
    kw.update(bad)
    with pytest.raises(ParameterError):
        KernelSpec(**kw)


def test_unknown_family():
    with pytest.raises((ParameterError, ConfigurationError, ValueError)):
        KernelSpec("matern72", 1.0, 1.0)


def test_subband_dimension_and_zero_frequency_reduces_to_matern():
    m = matern_sde(KernelSpec("matern12", 3.0, 1.5))
    s = subband_sde(0.0, m)
    assert s.dim == 2
    taus = np.arange(0, 20.0)
    np.testing.assert_allclose(kernel_covariance(s, taus), kernel_covariance(m, taus), atol=1e-12)


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("omega", [None, 0.0, 0.3, 1.7, math.pi])
def test_covariance_matches_analytic_over_100_lags(family, omega):
    spec = KernelSpec(family, 6.0, 1.7, omega)
    sde = kernel_sde(spec)
    taus = np.arange(101.0)
    assert np.max(np.abs(kernel_covariance(sde, taus) - spec.analytic(taus))) < 1e-8
    assert lyap_residual(sde) < 1e-10
    assert sde.variance == pytest.approx(1.7, rel=1e-12)


@pytest.mark.parametrize("family", FAMILIES)
def test_closed_form_pinf_matches_lyapunov(family):
    spec = KernelSpec(family, 0.37, 2.2)
    sde = matern_sde(spec)
    np.testing.assert_allclose(solve_lyapunov(sde.F, sde.L, sde.Qc), matern_pinf_closed_form(spec), atol=1e-10)


def test_scalar_lyapunov():
    np.testing.assert_allclose(solve_lyapunov(np.array([[-1.0]]), np.array([[1.0]]), np.array([[2.0]])), [[1.0]])


def test_lyapunov_rejects_unstable():
    with pytest.raises(StabilityError):
        solve_lyapunov(np.array([[0.5]]), np.array([[1.0]]), np.array([[1.0]]))


def test_discretize_matern12_values():
    sde = matern_sde(KernelSpec("matern12", 1.0, 1.0))
    A, Q = discretize(sde.F, sde.Pinf, 1.0)
    assert A[0, 0] == pytest.approx(0.367879, abs=1e-6)
    assert Q[0, 0] == pytest.approx(0.864665, abs=1e-6)


def test_discretize_small_step_limit():
    sde = kernel_sde(KernelSpec("matern52", 1.0, 1.0, 0.5))
    A, Q = discretize(sde.F, sde.Pinf, 1e-12)
    np.testing.assert_allclose(A, np.eye(sde.dim), atol=1e-10)
    assert np.linalg.norm(Q) < 1e-10 * np.linalg.norm(sde.Pinf)


def test_discretize_rejects_bad_step():
    sde = matern_sde(KernelSpec())
    with pytest.raises(ParameterError):
        discretize(sde.F, sde.Pinf, 0.0)


@given(st.sampled_from(FAMILIES), st.floats(0.05, 50.0), st.floats(0.01, 10.0),
       st.one_of(st.none(), st.floats(0.0, math.pi)), st.floats(0.01, 3.0), st.floats(0.01, 3.0))
def test_discretization_properties(family, ls, var, omega, dt1, dt2):
    sde = kernel_sde(KernelSpec(family, ls, var, omega))
    A1, Q1 = discretize(sde.F, sde.Pinf, dt1)
    A2, _ = discretize(sde.F, sde.Pinf, dt2)
    A12, _ = discretize(sde.F, sde.Pinf, dt1 + dt2)
    np.testing.assert_allclose(A1 @ A2, A12, atol=1e-10)
    assert np.max(np.abs(np.linalg.eigvals(A1))) < 1.0
    np.testing.assert_allclose(Q1, Q1.T, atol=0)
    assert np.min(np.linalg.eigvalsh(Q1)) >= -1e-12
    resid = Q1 - (sde.Pinf - A1 @ sde.Pinf @ A1.T)
    assert np.linalg.norm(resid) < 1e-10 * max(1.0, var)
    np.testing.assert_allclose(sde.Pinf, sde.Pinf.T, atol=1e-12 * var)


def _stacked(D, N):
    subs = [kernel_sde(KernelSpec("matern12", 2.0 + d, 1.0, 0.3 + 0.1 * d)) for d in range(D)]
    mods = [kernel_sde(KernelSpec("matern52", 5.0, 1.0)) for _ in range(N)]
    return stack_model(subs, mods, 1.0)


@pytest.mark.parametrize("D,N,M", [(16, 3, 41), (1, 1, 5)])
def test_stack_dimension(D, N, M):
    ss = _stacked(D, N)
    assert ss.dim == M
    assert ss.layout.Hz.shape == (D, M) and ss.layout.Hg.shape == (N, M)


def test_three_source_stack_is_123():
    subs, mods = [], []
    for _ in range(3):
        subs += [kernel_sde(KernelSpec("matern12", 2.0, 1.0, 0.5)) for _ in range(16)]
        mods += [kernel_sde(KernelSpec("matern52", 5.0, 1.0)) for _ in range(3)]
    assert stack_model(subs, mods, 1.0).dim == 123


def test_matern12_both_gives_three_states():
    ss = stack_model([kernel_sde(KernelSpec("matern12", 1.0, 1.0, 0.4))], [matern_sde(KernelSpec("matern12", 1.0, 1.0))], 1.0)
    assert ss.dim == 3


def test_stack_keeps_blocks_independent():
    ss = _stacked(3, 2)
    mask = np.zeros((ss.dim, ss.dim), bool)
    for b in ss.blocks:
        mask[b.sl, b.sl] = True
    assert np.all(ss.P0[~mask] == 0) and np.all(ss.Q[~mask] == 0) and np.all(ss.A[~mask] == 0)
    assert [b.kind for b in ss.blocks] == ["z"] * 3 + ["g"] * 2


def test_stack_rejects_empty():
    with pytest.raises(ConfigurationError):
        stack_model([], [matern_sde(KernelSpec())], 1.0)
