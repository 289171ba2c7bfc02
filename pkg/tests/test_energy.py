import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plaplace.energy import (
    EnergyParams,
    InequalityReport,
    calibrate_constants,
    grad_phi,
    hessian_phi,
    phi,
    third_phi,
    verify_inequalities,
)
from plaplace.errors import InequalityViolation, SingularPoint

vec2 = st.tuples(st.floats(-5, 5), st.floats(-5, 5)).map(np.array)
ps = st.floats(1.2, 4.0)
taus = st.floats(0.0, 1.0)


def test_params_validation():
    with pytest.raises(ValueError):
        EnergyParams(1.0)
    with pytest.raises(ValueError):
        EnergyParams(0.5)
    with pytest.raises(ValueError):
        EnergyParams(2.0, -0.1)
    assert EnergyParams(2.0, 0.0).tau == 0.0
    assert EnergyParams(3.0).q == pytest.approx(1.5)


def test_phi_examples():
    assert phi([0.0, 0.0], EnergyParams(2, 0)) == 0.0
    assert phi([1.0, 0.0], EnergyParams(2, 0)) == pytest.approx(0.5)
    assert phi([3.0, 4.0], EnergyParams(3, 0)) == pytest.approx(125 / 3)


def test_grad_examples():
    np.testing.assert_allclose(grad_phi([1.0, 0.0], EnergyParams(2, 0.7)), [1.0, 0.0])
    np.testing.assert_allclose(grad_phi([3.0, 4.0], EnergyParams(3, 0)), [15.0, 20.0])
    np.testing.assert_array_equal(grad_phi([0.0, 0.0], EnergyParams(1.5, 0)), [0.0, 0.0])


def test_hessian_singular_point():
    with pytest.raises(SingularPoint):
        hessian_phi([0.0, 0.0], EnergyParams(3.0, 0.0))
    np.testing.assert_array_equal(hessian_phi([0.0, 0.0], EnergyParams(2.0, 0.0)), np.eye(2))
    # the floor makes the point admissible
    H = hessian_phi([0.0, 0.0], EnergyParams(1.5, 0.0), floor=1e-3)
    assert np.all(np.isfinite(H))


def test_broadcasting():
    x = np.random.default_rng(0).normal(size=(4, 5, 2))
    prm = EnergyParams(2.5, 0.1)
    assert phi(x, prm).shape == (4, 5)
    assert grad_phi(x, prm).shape == (4, 5, 2)
    assert hessian_phi(x, prm).shape == (4, 5, 2, 2)
    assert third_phi(x, prm).shape == (4, 5, 2, 2, 2)


@settings(max_examples=200, deadline=None)
@given(vec2, ps, taus)
def test_grad_is_odd_and_phi_nonnegative(x, p, tau):
    prm = EnergyParams(p, tau)
    np.testing.assert_allclose(grad_phi(-x, prm), -grad_phi(x, prm))
    assert phi(x, prm) >= 0


@settings(max_examples=200, deadline=None)
@given(vec2, ps, taus)
def test_derivatives_match_finite_differences(x, p, tau):
    prm = EnergyParams(p, tau)
    if tau**2 + x @ x < 1e-2:
        return
    h = 1e-6
    E = np.eye(2)
    g_fd = np.array([(phi(x + h * e, prm) - phi(x - h * e, prm)) / (2 * h) for e in E])
    np.testing.assert_allclose(grad_phi(x, prm), g_fd, rtol=1e-5, atol=1e-7)
    H_fd = np.array([(grad_phi(x + h * e, prm) - grad_phi(x - h * e, prm)) / (2 * h) for e in E])
    np.testing.assert_allclose(hessian_phi(x, prm), H_fd, rtol=1e-5, atol=1e-6)
    T_fd = np.array([(hessian_phi(x + h * e, prm) - hessian_phi(x - h * e, prm)) / (2 * h) for e in E])
    np.testing.assert_allclose(third_phi(x, prm), T_fd, rtol=1e-4, atol=1e-5)


@settings(max_examples=200, deadline=None)
@given(vec2, ps, taus)
def test_hessian_symmetric_positive(x, p, tau):
    prm = EnergyParams(p, tau)
    if tau**2 + x @ x < 1e-8:
        return
    H = hessian_phi(x, prm)
    np.testing.assert_allclose(H, H.T)
    assert np.linalg.eigvalsh(H).min() > 0


def test_verify_inequalities_full_range():
    cal = calibrate_constants((1.2, 4.0))
    rep = verify_inequalities(20_000, 1, (1.2, 4.0), (0.0, 1.0), calibration=cal)
    assert isinstance(rep, InequalityReport)
    assert rep.ok
    assert sum(rep.failed.values()) == 0
    assert "hessian_lower" in rep.summary()


def test_verify_inequalities_detects_bad_constants():
    edges, table = calibrate_constants((1.5, 3.0), n_bins=8)
    with pytest.raises(InequalityViolation) as info:
        verify_inequalities(5_000, 0, (1.5, 3.0), calibration=(edges, 0.5 * table))
    assert info.value.name in ("third_bound", "monotone", "lipschitz")


def test_verify_inequalities_argument_checks():
    with pytest.raises(ValueError):
        verify_inequalities(0)
    with pytest.raises(ValueError):
        verify_inequalities(10, p_range=(0.9, 2.0))
    with pytest.raises(ValueError):
        verify_inequalities(10, tau_range=(-1.0, 1.0))


def test_hessian_examples():
    np.testing.assert_allclose(hessian_phi([0.3, -2.0], EnergyParams(2, 0)), np.eye(2))
    np.testing.assert_allclose(hessian_phi([1.0, 0.0], EnergyParams(4, 0)), np.diag([3.0, 1.0]))
    H = hessian_phi([3.0, 4.0], EnergyParams(3, 0))
    assert np.linalg.norm(H, 2) <= 2 * 5 * (1 + 1e-12)


@settings(max_examples=100, deadline=None)
@given(vec2, st.floats(1.2, 4.0), st.floats(0.01, 20.0))
def test_gradient_homogeneity(x, p, lam):
    prm = EnergyParams(p, 0.0)
    np.testing.assert_allclose(grad_phi(lam * x, prm), lam ** (p - 1) * grad_phi(x, prm), rtol=1e-12, atol=1e-300)


@settings(max_examples=100, deadline=None)
@given(vec2, vec2, taus)
def test_gradient_is_identity_at_p2(x, y, tau):
    prm = EnergyParams(2.0, tau)
    np.testing.assert_allclose(grad_phi(x, prm) - grad_phi(y, prm), x - y, atol=1e-12)


def test_equal_arguments_give_zero_difference():
    x = np.array([0.7, -1.1])
    prm = EnergyParams(2.7, 0.2)
    assert np.all(grad_phi(x, prm) - grad_phi(x.copy(), prm) == 0)


def test_gradient_difference_quotient_is_second_order():
    rng = np.random.default_rng(5)
    prm = EnergyParams(2.6, 0.3)
    for _ in range(10):
        x, d = rng.normal(size=2), rng.normal(size=2)
        errs = [abs((phi(x + h * d, prm) - phi(x - h * d, prm)) / (2 * h) - grad_phi(x, prm) @ d)
                for h in (1e-2, 1e-3)]
        # second order: a tenfold smaller h gives about 100x smaller error
        assert errs[1] < errs[0] / 30


@settings(max_examples=200, deadline=None)
@given(vec2, vec2, ps, taus)
def test_hessian_lower_bound_and_growth(x, y, p, tau):
    prm = EnergyParams(p, tau)
    s = tau**2 + x @ x
    if s < 1e-8:
        return
    H = hessian_phi(x, prm)
    lower = s ** ((p - 4) / 2) * (tau**2 + min(p - 1, 1) * (x @ x)) * (y @ y)
    assert y @ H @ y >= lower * (1 - 1e-10) - 1e-300
    q = p / (p - 1)
    g = np.linalg.norm(grad_phi(x, prm))
    assert g**q <= p * phi(x, prm) * (1 + 1e-10)
    assert p * phi(x, prm) <= 2 ** (p / 2) * (tau**p + np.linalg.norm(x) ** p) * (1 + 1e-10)
