# services/model_service.py
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.integrate import simpson

from services.errors import AssumptionViolated, DomainError, UnsupportedExponent

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

# Reference parameter set of the quadratic experiments.
REFERENCE_ETA = 0.3
REFERENCE_VOLUME = 4e6
REFERENCE_K = 1e-7
REFERENCE_S0 = 45.0
REFERENCE_SIGMA = 0.6
REFERENCE_Q0 = 2e5
REFERENCE_ELL = -1.4


def _require_finite(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise DomainError(f"{name} must be finite, got {value}")
    return value


@dataclass(frozen=True)
class ModelParams:
    """Market, impact and cost parameters of the liquidation problem.

    p_hat is the execution-cost exponent; p and K are derived so that the
    conjugacy 1/p + 1/p_hat = 1 and K = k/p_hat hold by construction.
    """

    p_hat: float = 2.0
    k: float = REFERENCE_K
    eta: float = REFERENCE_ETA
    V: float = REFERENCE_VOLUME
    sigma: float = REFERENCE_SIGMA
    S0: float = REFERENCE_S0
    T: float = 1.0
    q0: float = REFERENCE_Q0

    def __post_init__(self) -> None:
        for name in ("p_hat", "k", "eta", "V", "sigma", "S0", "T", "q0"):
            _require_finite(name, getattr(self, name))
        if self.p_hat <= 1.0:
            raise DomainError(f"p_hat must be > 1, got {self.p_hat}")
        if self.k < 0.0:
            raise DomainError(f"k must be >= 0, got {self.k}")
        for name in ("eta", "V", "sigma", "S0", "T", "q0"):
            if getattr(self, name) <= 0.0:
                raise DomainError(f"{name} must be > 0, got {getattr(self, name)}")

    @property
    def p(self) -> float:
        return self.p_hat / (self.p_hat - 1.0)

    @property
    def K(self) -> float:
        return self.k / self.p_hat

    @property
    def vol_bar(self) -> float:
        """Constant liquidity bound (p_hat - 1) V / eta^(p - 1)."""
        return (self.p_hat - 1.0) * self.V / self.eta ** (self.p - 1.0)

    def scaled(self, c: float) -> "ModelParams":
        """Scale (sigma, S0, k, eta) by c; leaves every canonical quantity unchanged."""
        return replace(self, sigma=self.sigma * c, S0=self.S0 * c, k=self.k * c, eta=self.eta * c)


@dataclass(frozen=True)
class SVParams:
    alpha: float
    theta: float
    c: float
    rho: float
    nu0: float

    def __post_init__(self) -> None:
        for name in ("alpha", "theta", "c", "rho", "nu0"):
            _require_finite(name, getattr(self, name))
        for name in ("alpha", "theta", "c", "nu0"):
            if getattr(self, name) <= 0.0:
                raise DomainError(f"{name} must be > 0, got {getattr(self, name)}")
        if not -1.0 <= self.rho <= 1.0:
            raise DomainError(f"rho must lie in [-1, 1], got {self.rho}")

    @property
    def nu_max(self) -> float:
        """Long-run mean plus eight stationary standard deviations."""
        return self.theta + 8.0 * self.c * math.sqrt(self.theta / (2.0 * self.alpha))


# A paused R4 trader back at ell + b either must resume (forced) or may retire
# and hold to T at cost -K_c (optional).
REENTRY_POLICIES = ("optional", "forced")


class RegimeKind(str, Enum):
    R0_FULL_LIQUIDATION = "R0"
    R1_TERMINAL_THRESHOLD = "R1"
    R2_STOP_AT_HIT = "R2"
    R3_PAUSE_BELOW = "R3"
    R4_PAUSE_WITH_BUFFER = "R4"

    @classmethod
    def parse(cls, value: str) -> "RegimeKind":
        text = str(value).strip()
        for kind in cls:
            if text.upper() == kind.value or text.upper() == kind.name:
                return kind
        raise DomainError(f"Unknown regime kind: {value!r} (expected one of R0..R4)")


@dataclass(frozen=True)
class RegimeSpec:
    """Trading permission and forced-liquidation event. ell and b are in sigma units."""

    kind: RegimeKind = RegimeKind.R1_TERMINAL_THRESHOLD
    ell: float = REFERENCE_ELL
    delta: float = 0.0
    b: float = 0.0
    n_switches: Optional[int] = None
    reentry: str = "optional"

    def __post_init__(self) -> None:
        _require_finite("ell", self.ell)
        _require_finite("delta", self.delta)
        _require_finite("b", self.b)
        if self.delta < 0.0:
            raise DomainError(f"delta must be >= 0, got {self.delta}")
        if self.n_switches is not None and int(self.n_switches) < 1:
            raise DomainError(f"n_switches must be >= 1 or unbounded, got {self.n_switches}")
        if self.reentry not in REENTRY_POLICIES:
            raise DomainError(f"reentry must be one of {REENTRY_POLICIES}, got {self.reentry!r}")

    @property
    def has_threshold(self) -> bool:
        return self.kind is not RegimeKind.R0_FULL_LIQUIDATION


@dataclass(frozen=True)
class CanonicalParams:
    K_c: float
    coef_A1: float
    coef_A2: float
    coef_A3: float
    ell_c: float
    T: float
    delta: float = 0.0
    b: float = 0.0
    p: float = 2.0
    vol: float = 1.0


@dataclass(frozen=True)
class ConditionCheck:
    name: str
    passed: bool
    lhs: float
    rhs: float
    detail: str = ""

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs


@dataclass(frozen=True)
class ValidationReport:
    checks: List[ConditionCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> List[ConditionCheck]:
        return [c for c in self.checks if not c.passed]

    def lines(self) -> List[str]:
        out = []
        for c in self.checks:
            mark = "✅" if c.passed else "❌"
            out.append(
                f"{mark} {c.name}: {c.lhs:.6g} < {c.rhs:.6g} (margin {c.margin:.6g})"
                + (f" - {c.detail}" if c.detail else "")
            )
        return out


def validate(
    params: ModelParams,
    sv: Optional[SVParams] = None,
    regime: Optional[RegimeSpec] = None,
    strict: bool = True,
) -> ValidationReport:
    """Check the no-explosion condition, Feller and regime sanity.

    In strict mode the first failed condition raises AssumptionViolated.
    """
    checks: List[ConditionCheck] = []

    p = params.p
    lhs = params.K ** (p - 1.0) * (p - 1.0) * params.T * params.vol_bar if params.K > 0 else 0.0
    detail = ""
    if params.p_hat == 2.0:
        detail = f"K_c*T with K_c = kV/(2 eta) = {canonical_K(params):.6g}"
    checks.append(ConditionCheck("lower_bound_finite", lhs < 1.0, lhs, 1.0, detail))

    checks.append(
        ConditionCheck(
            "liquidity_near_T",
            params.vol_bar > 0.0,
            0.0,
            params.vol_bar,
            "trading permitted on a terminal window"
            if regime is None or regime.kind in (RegimeKind.R0_FULL_LIQUIDATION, RegimeKind.R1_TERMINAL_THRESHOLD)
            else "handled by the stopping/interval reduction",
        )
    )

    if sv is not None:
        checks.append(ConditionCheck("feller", 2.0 * sv.alpha * sv.theta > sv.c**2, sv.c**2, 2.0 * sv.alpha * sv.theta))

    if regime is not None:
        if regime.kind in (RegimeKind.R3_PAUSE_BELOW, RegimeKind.R4_PAUSE_WITH_BUFFER):
            checks.append(ConditionCheck("regime_delta", regime.delta < params.T, regime.delta, params.T))
        if regime.kind is RegimeKind.R4_PAUSE_WITH_BUFFER:
            checks.append(ConditionCheck("regime_buffer", regime.b > 0.0, -regime.b, 0.0, "b must be positive"))

    report = ValidationReport(checks)
    for c in report.checks:
        log = logger.info if c.passed else logger.warning
        log(f"{'✅' if c.passed else '⚠️'} {c.name}: lhs={c.lhs:.6g} rhs={c.rhs:.6g}")
    if strict and not report.passed:
        first = report.failures[0]
        raise AssumptionViolated(first.name, first.margin, first.detail)
    return report


def lower_bound_z(params: ModelParams, vol_bar: float, t):
    """Deterministic lower bound z_t = -(K^(1-p) - (p-1) vol_bar (T-t))^(-1/(p-1)).

    Accepts scalars or arrays of times. With K = 0 the bound is 0 everywhere.
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0.0) or np.any(t_arr > params.T + 1e-12):
        raise DomainError(f"t must lie in [0, T={params.T}]")
    if params.K == 0.0:
        out = np.zeros_like(t_arr)
        return float(out) if out.ndim == 0 else out
    p = params.p
    bracket = params.K ** (1.0 - p) - (p - 1.0) * vol_bar * (params.T - t_arr)
    if np.any(bracket <= 0.0):
        raise AssumptionViolated("lower_bound_finite", float(np.min(bracket)), "z explodes before t=0")
    out = -(bracket ** (-1.0 / (p - 1.0)))
    return float(out) if out.ndim == 0 else out


def integrated_vol(vol_fn: Callable[[np.ndarray], np.ndarray], a: float, b: float, rtol: float = 1e-10) -> float:
    """Composite Simpson of vol over [a, b], doubling the panels until the relative change is below rtol."""
    if b <= a:
        return 0.0
    n = 16
    prev = None
    while n <= 2**20:
        s = np.linspace(a, b, n + 1)
        val = float(simpson(np.asarray(vol_fn(s), dtype=float), x=s))
        if prev is not None and abs(val - prev) <= rtol * max(abs(val), 1e-300):
            return val
        prev = val
        n *= 2
    logger.warning(f"⚠️ Simpson doubling stopped at {n // 2} panels before reaching rtol={rtol}")
    return float(prev)


def lower_bound_z_profile(params: ModelParams, vol_fn: Callable[[np.ndarray], np.ndarray], t: float) -> float:
    """Lower bound for a deterministic, time-varying vol."""
    if not 0.0 <= t <= params.T:
        raise DomainError(f"t must lie in [0, T={params.T}], got {t}")
    if params.K == 0.0:
        return 0.0
    p = params.p
    bracket = params.K ** (1.0 - p) - (p - 1.0) * integrated_vol(vol_fn, t, params.T)
    if bracket <= 0.0:
        raise AssumptionViolated("lower_bound_finite", bracket, "z explodes before t=0")
    return -(bracket ** (-1.0 / (p - 1.0)))


def analytic_blowup_profile(params: ModelParams, vol_const: float, t):
    """Solution of y' = vol y^p with y(T) = +inf."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr >= params.T):
        raise DomainError(f"blow-up profile is only defined for t < T={params.T}")
    if vol_const <= 0.0:
        raise DomainError(f"vol_const must be > 0, got {vol_const}")
    p = params.p
    out = ((p - 1.0) * vol_const * (params.T - t_arr)) ** (-1.0 / (p - 1.0))
    return float(out) if out.ndim == 0 else out


def _scale_free(x: float) -> float:
    return float(f"{x:.12g}")


def canonical_K(params: ModelParams) -> float:
    """K_c = (k/eta) V/2 at 12 significant digits.

    A common price-scale factor on k and eta moves the ratio by an ulp at
    most; the rounding makes scaled configurations share K_c exactly.
    """
    return _scale_free((params.k / params.eta) * params.V / 2.0)


def to_canonical(params: ModelParams, regime: RegimeSpec) -> CanonicalParams:
    """Remove sigma, eta and V from the quadratic problem."""
    if params.p_hat != 2.0:
        raise UnsupportedExponent(f"canonical scaling needs p_hat = 2, got {params.p_hat}")
    return CanonicalParams(
        K_c=canonical_K(params),
        coef_A1=-_scale_free(params.k / params.S0 * params.q0 / 2.0),
        coef_A2=_scale_free(params.sigma / params.S0),
        coef_A3=_scale_free(params.eta / params.S0 * params.q0 / params.V),
        ell_c=regime.ell,
        T=params.T,
        delta=regime.delta,
        b=regime.b,
    )


def canonical_model(canon: CanonicalParams) -> ModelParams:
    """Unit-volatility model whose K equals K_c and whose vol_bar is 1."""
    # p_hat = 2, eta = V = 1 gives vol_bar = 1 and K = k/2.
    return ModelParams(p_hat=2.0, k=2.0 * canon.K_c, eta=1.0, V=1.0, sigma=1.0, S0=1.0, T=canon.T, q0=1.0)


def baseline_is_quantities(T: float) -> Tuple[float, float]:
    """Cost and noise moments of the uniform-speed strategy."""
    if T <= 0.0:
        raise DomainError(f"T must be > 0, got {T}")
    return 1.0 / T, T / 3.0


def permanent_impact(q_rate, q, params: ModelParams):
    return params.k * np.abs(q) ** (params.p_hat - 2.0) * q_rate


def execution_cost(q_rate, params: ModelParams):
    """V * L(Q'/V) with L(rho) = eta |rho|^p_hat."""
    return params.V * params.eta * np.abs(np.asarray(q_rate) / params.V) ** params.p_hat


def price_threshold(params: ModelParams, regime: RegimeSpec) -> float:
    return params.S0 + regime.ell * params.sigma
