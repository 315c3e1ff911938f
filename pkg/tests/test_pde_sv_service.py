import numpy as np
import pytest

from services.errors import DomainError, InstabilityDetected
from services.model_service import SVParams
from services.pde_1d_service import TerminalSpec, solve_singular
from services.pde_sv_service import GridSpec2D, build_nu_axis, optimal_rate_sv, solve_sv, vol_inverse_nu

SV = SVParams(alpha=2.0, theta=1.0, c=0.5, rho=0.5, nu0=1.0)


def _bump(spec: GridSpec2D) -> TerminalSpec:
    s = np.linspace(spec.s_min, spec.s_max, spec.ns)
    return TerminalSpec.custom(1.0 / (1.0 + s**2))


def test_variance_axis_carries_initial_variance():
    axis = build_nu_axis(SV, 40)
    assert axis.size == 40
    assert axis[0] > 0.0
    assert SV.nu0 in axis
    assert axis[-1] >= SV.nu0
    assert np.all(np.diff(axis) > 0.0)


def test_inverse_variance_liquidity_fixture():
    vol = vol_inverse_nu(2.0)
    out = vol(0.0, np.array([1.0, 3.0]), np.zeros(2))
    assert np.allclose(out, [1.0, 0.5])


def test_unknown_scheme_is_rejected():
    with pytest.raises(DomainError):
        GridSpec2D(scheme="crank")


def test_correlation_flip_mirrors_the_solution():
    spec = GridSpec2D(ns=60, n_nu=20, nt=40, s_min=-4.0, s_max=4.0)
    terminal = _bump(spec)
    a = solve_sv(spec, SV, terminal)
    b = solve_sv(spec, SVParams(alpha=2.0, theta=1.0, c=0.5, rho=-0.5, nu0=1.0), terminal)
    assert np.allclose(a.values[:, :, ::-1], b.values, rtol=1e-9, atol=1e-12)


def test_bounded_terminal_stays_bounded():
    spec = GridSpec2D(ns=60, n_nu=20, nt=40, s_min=-4.0, s_max=4.0)
    grid = solve_sv(spec, SV, _bump(spec))
    assert np.all(np.isfinite(grid.values))
    assert grid.values[0].max() < 1.0


def test_explicit_scheme_reports_cfl_exhaustion():
    spec = GridSpec2D(ns=60, n_nu=20, nt=40, s_min=-4.0, s_max=4.0, scheme="explicit", max_substeps=5)
    with pytest.raises(InstabilityDetected):
        solve_sv(spec, SV, _bump(spec))


def test_slice_returns_one_dimensional_section():
    spec = GridSpec2D(ns=60, n_nu=20, nt=40, s_min=-4.0, s_max=4.0)
    grid = solve_sv(spec, SV, _bump(spec))
    section = grid.slice_nu(SV.nu0)
    j = grid.nu_index(SV.nu0)
    assert np.array_equal(section.values, grid.values[:, j, :])
    assert np.array_equal(section.x, grid.s)


@pytest.mark.slow
def test_frozen_variance_reduces_to_one_dimensional_solve():
    sv = SVParams(alpha=1e-6, theta=1.0, c=1e-6, rho=0.0, nu0=1.0)
    spec = GridSpec2D(ns=96, n_nu=96, nt=400)
    terminal = TerminalSpec.threshold(2.0 / 3.0, -1.4)
    grid2 = solve_sv(spec, sv, terminal)
    grid1 = solve_singular(spec.as_1d(), terminal)
    section = grid2.slice_nu(sv.nu0)
    rows = grid1.t <= grid1.T - 0.05
    assert np.array_equal(section.x, grid1.x)
    assert np.max(np.abs(section.values[rows] - grid1.values[rows])) < 1e-3


def test_feedback_rate_matches_one_factor_formula():
    assert optimal_rate_sv(2.0, 1.0, 2.0, 0.5) == pytest.approx(-1.0)
    assert optimal_rate_sv(0.0, 1.0, 2.0, 0.5) == 0.0
    assert optimal_rate_sv(-0.5, 2.0, 3.0, 1.0) == pytest.approx(2.0 * 0.25 * 2.0)
    assert optimal_rate_sv(8.0, 1.0, 1.5, 1.0) == pytest.approx(-1.4142, abs=1e-4)


SMALL = GridSpec2D(ns=50, n_nu=8, nt=40, s_min=-4.0, s_max=4.0)


@pytest.mark.parametrize("p, K", [(2.0, 2.0 / 3.0), (3.0, 0.5)])
def test_constant_terminal_follows_the_lower_bound_profile(p, K):
    grid = solve_sv(SMALL, SV, TerminalSpec.constant_neg(K), p=p)
    tau = grid.T - grid.t
    z = -((K ** (1.0 - p) - (p - 1.0) * tau) ** (-1.0 / (p - 1.0)))
    expected = np.broadcast_to(z[:, None, None], grid.values.shape)
    np.testing.assert_allclose(grid.values, expected, rtol=1e-9)


@pytest.mark.parametrize("p", [2.0, 3.0])
def test_singular_everywhere_matches_the_blow_up_profile(p):
    grid = solve_sv(SMALL, SV, TerminalSpec.all_singular(), p=p)
    rows = grid.t <= grid.T - 0.05
    tau = (grid.T - grid.t[rows])[:, None, None]
    profile = ((p - 1.0) * tau) ** (-1.0 / (p - 1.0))
    np.testing.assert_allclose(grid.values[rows], np.broadcast_to(profile, grid.values[rows].shape), rtol=2e-3)
    assert grid.certificate.converged


def test_truncation_levels_increase_without_correlation():
    sv = SVParams(alpha=2.0, theta=1.0, c=0.5, rho=0.0, nu0=1.0)
    grid = solve_sv(SMALL, sv, TerminalSpec.threshold(2.0 / 3.0, -1.4), schedule=(1e2, 1e3, 1e4, 1e5, 1e6))
    cert = grid.certificate
    assert cert.monotone
    assert cert.min_increment >= -1e-12
    assert grid.values.min() >= -2.0 - 1e-9
