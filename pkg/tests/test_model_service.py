import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from services.errors import AssumptionViolated, DomainError, UnsupportedExponent
from services.model_service import (
    ModelParams,
    RegimeKind,
    RegimeSpec,
    SVParams,
    analytic_blowup_profile,
    baseline_is_quantities,
    canonical_K,
    canonical_model,
    execution_cost,
    lower_bound_z,
    lower_bound_z_profile,
    permanent_impact,
    price_threshold,
    to_canonical,
    validate,
)


def test_reference_parameters_pass_with_two_thirds(reference_params):
    report = validate(reference_params)
    assert report.passed
    check = report.checks[0]
    assert check.name == "lower_bound_finite"
    assert check.lhs == pytest.approx(2.0 / 3.0)
    assert check.margin == pytest.approx(1.0 / 3.0)
    assert to_canonical(reference_params, RegimeSpec()).K_c == pytest.approx(2.0 / 3.0)


def test_high_impact_parameters_violate_the_lower_bound():
    params = ModelParams(eta=0.1, k=2e-7)
    with pytest.raises(AssumptionViolated) as exc:
        validate(params)
    assert exc.value.which == "lower_bound_finite"
    assert exc.value.margin == pytest.approx(-3.0)

    report = validate(params, strict=False)
    assert [c.name for c in report.failures] == ["lower_bound_finite"]
    assert any(line.startswith("❌") for line in report.lines())


def test_no_permanent_impact_passes_and_bound_is_zero():
    params = ModelParams(k=0.0)
    assert validate(params).passed
    assert np.all(lower_bound_z(params, params.vol_bar, np.linspace(0.0, 1.0, 5)) == 0.0)


def test_lower_bound_matches_closed_form(reference_params):
    vol_bar = reference_params.vol_bar
    K = reference_params.K
    assert lower_bound_z(reference_params, vol_bar, 1.0) == pytest.approx(-K)
    expected = -1.0 / (1.0 / K - vol_bar)
    assert lower_bound_z(reference_params, vol_bar, 0.0) == pytest.approx(expected, rel=1e-12)


def test_lower_bound_raises_when_it_explodes():
    params = ModelParams(eta=0.1, k=2e-7)
    with pytest.raises(AssumptionViolated):
        lower_bound_z(params, params.vol_bar, 0.0)


def test_lower_bound_profile_agrees_with_constant_vol(reference_params):
    vol = reference_params.vol_bar
    z_const = lower_bound_z(reference_params, vol, 0.3)
    z_prof = lower_bound_z_profile(reference_params, lambda s: np.full_like(s, vol), 0.3)
    assert z_prof == pytest.approx(z_const, rel=1e-9)


def test_lower_bound_profile_with_time_varying_vol(reference_params):
    # vol(s) = 2 s * vol_bar integrates to vol_bar (T^2 - t^2)
    vol = reference_params.vol_bar
    t = 0.5
    z = lower_bound_z_profile(reference_params, lambda s: 2.0 * s * vol, t)
    expected = -1.0 / (1.0 / reference_params.K - vol * (1.0 - t**2))
    assert z == pytest.approx(expected, rel=1e-9)


@given(
    K=st.floats(min_value=0.01, max_value=2.0),
    frac=st.floats(min_value=0.0, max_value=0.95),
)
def test_lower_bound_is_non_decreasing_in_time(K, frac):
    # vol_bar chosen so that K * T * vol_bar = frac < 1
    canon = to_canonical(ModelParams(), RegimeSpec())
    params = canonical_model(replace(canon, K_c=K))
    vol_bar = frac / K
    t = np.linspace(0.0, 1.0, 21)
    z = lower_bound_z(params, vol_bar, t)
    assert np.all(np.diff(z) >= -1e-12)
    assert np.all(z <= -K + 1e-12)


def test_blowup_profile_and_domain(reference_params):
    params = ModelParams(T=2.0)
    assert analytic_blowup_profile(params, 1.0, 0.0) == pytest.approx(0.5)
    with pytest.raises(DomainError):
        analytic_blowup_profile(params, 1.0, 2.0)


def test_parameter_domain_errors_are_value_errors():
    with pytest.raises(DomainError):
        ModelParams(eta=0.0)
    with pytest.raises(ValueError):
        ModelParams(p_hat=1.0)
    with pytest.raises(DomainError):
        ModelParams(sigma=math.nan)
    with pytest.raises(DomainError):
        SVParams(alpha=1.0, theta=1.0, c=0.2, rho=1.5, nu0=1.0)
    with pytest.raises(DomainError):
        RegimeSpec(delta=-0.1)


def test_feller_violation_is_reported():
    sv = SVParams(alpha=1.0, theta=0.04, c=0.5, rho=0.0, nu0=0.04)
    with pytest.raises(AssumptionViolated) as exc:
        validate(ModelParams(), sv=sv)
    assert exc.value.which == "feller"


def test_pause_regime_needs_positive_buffer():
    report = validate(ModelParams(), regime=RegimeSpec(kind=RegimeKind.R4_PAUSE_WITH_BUFFER, delta=0.1, b=0.0), strict=False)
    assert [c.name for c in report.failures] == ["regime_buffer"]


def test_canonical_scaling_needs_quadratic_cost():
    with pytest.raises(UnsupportedExponent):
        to_canonical(ModelParams(p_hat=1.5), RegimeSpec())


def test_scaling_leaves_canonical_quantities_unchanged(reference_params):
    a = to_canonical(reference_params, RegimeSpec())
    b = to_canonical(reference_params.scaled(2.0), RegimeSpec())
    assert a == b


@given(st.sampled_from([3.0, 7.0, 0.1, 1e3]) | st.floats(min_value=1e-3, max_value=1e3))
def test_canonical_K_is_exact_under_any_price_scale(c):
    base = ModelParams()
    scaled = base.scaled(c)
    assert canonical_K(scaled) == canonical_K(base)
    assert to_canonical(scaled, RegimeSpec()) == to_canonical(base, RegimeSpec())
    assert to_canonical(scaled, RegimeSpec()).coef_A2 == pytest.approx(base.sigma / base.S0, rel=1e-11)


def test_canonical_model_has_unit_liquidity(reference_canon):
    model = canonical_model(reference_canon)
    assert model.vol_bar == 1.0
    assert model.K == pytest.approx(reference_canon.K_c)


def test_regime_kind_parsing():
    assert RegimeKind.parse("r3") is RegimeKind.R3_PAUSE_BELOW
    assert RegimeKind.parse("R2_STOP_AT_HIT") is RegimeKind.R2_STOP_AT_HIT
    with pytest.raises(DomainError):
        RegimeKind.parse("R9")


def test_baseline_quantities_and_price_helpers(reference_params):
    assert baseline_is_quantities(2.0) == (0.5, pytest.approx(2.0 / 3.0))
    assert execution_cost(reference_params.V, reference_params) == pytest.approx(reference_params.eta * reference_params.V)
    assert price_threshold(reference_params, RegimeSpec()) == pytest.approx(45.0 - 1.4 * 0.6)


def test_permanent_impact_is_linear_for_quadratic_cost(reference_params):
    assert permanent_impact(-3.0, 5.0, reference_params) == pytest.approx(-3.0 * reference_params.k)
    power = ModelParams(p_hat=1.5)
    assert permanent_impact(2.0, 4.0, power) == pytest.approx(power.k * 4.0**-0.5 * 2.0)
