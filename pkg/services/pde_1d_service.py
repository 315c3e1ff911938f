# services/pde_1d_service.py
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.linalg import solve_banded

from services.errors import AssumptionViolated, DomainError, InstabilityDetected, NoConvergence
from services.model_service import REENTRY_POLICIES

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

VolFn = Callable[[float, np.ndarray], np.ndarray]
BoundaryFn = Callable[[float], float]

DEFAULT_SCHEDULE: Tuple[float, ...] = (1e2, 1e3, 1e4, 1e5, 1e6)
MONOTONE_ATOL = 1e-12
MONOTONE_RTOL = 1e-12


def constant_vol(value: float = 1.0) -> VolFn:
    def _vol(t: float, x: np.ndarray) -> np.ndarray:
        return np.full(np.shape(x), float(value))

    _vol.constant = float(value)  # type: ignore[attr-defined]
    return _vol


def as_vol_fn(vol: Union[float, VolFn]) -> VolFn:
    if callable(vol):
        return vol
    return constant_vol(float(vol))


@dataclass(frozen=True)
class GridSpec1D:
    """Discretization of [t_start, T] x [x_min, x_max] in sigma units.

    anchors are placed exactly on nodes (threshold and re-entry level);
    breakpoints are placed exactly on stored time levels.
    """

    x_min: float = -6.0
    x_max: float = 6.0
    nx: int = 400
    nt: int = 400
    T: float = 1.0
    t_start: float = 0.0
    t_cut: float = 0.05
    substep_ratio: float = 0.25
    anchors: Tuple[float, ...] = ()
    breakpoints: Tuple[float, ...] = ()
    explicit_reaction: bool = False

    def __post_init__(self) -> None:
        if self.nx < 50 or self.nt < 1:
            raise DomainError(f"grid too coarse: nx={self.nx} (>= 50), nt={self.nt} (>= 1)")
        if not self.x_max > self.x_min:
            raise DomainError(f"x_max ({self.x_max}) must exceed x_min ({self.x_min})")
        if not 0.0 <= self.t_start < self.T:
            raise DomainError(f"t_start must lie in [0, T), got {self.t_start}")
        if not 0.0 < self.substep_ratio <= 1.0:
            raise DomainError(f"substep_ratio must lie in (0, 1], got {self.substep_ratio}")

    @classmethod
    def centered(cls, T: float = 1.0, x0: float = 0.0, width_sd: float = 6.0, **kwargs) -> "GridSpec1D":
        half = width_sd * math.sqrt(T)
        return cls(x_min=x0 - half, x_max=x0 + half, T=T, **kwargs)


class TerminalKind(str, Enum):
    THRESHOLD_SINGULAR = "threshold_singular"
    CONSTANT_NEG = "constant_neg"
    ALL_SINGULAR = "all_singular"
    CUSTOM = "custom"


@dataclass(frozen=True)
class TerminalSpec:
    kind: TerminalKind
    K_c: float = 0.0
    ell: float = 0.0
    values: Optional[Tuple[float, ...]] = None
    mollify_m: Optional[float] = None

    @property
    def singular(self) -> bool:
        return self.kind in (TerminalKind.THRESHOLD_SINGULAR, TerminalKind.ALL_SINGULAR)

    @classmethod
    def threshold(cls, K_c: float, ell: float, mollify_m: Optional[float] = None) -> "TerminalSpec":
        return cls(TerminalKind.THRESHOLD_SINGULAR, K_c=K_c, ell=ell, mollify_m=mollify_m)

    @classmethod
    def constant_neg(cls, K_c: float) -> "TerminalSpec":
        return cls(TerminalKind.CONSTANT_NEG, K_c=K_c)

    @classmethod
    def all_singular(cls) -> "TerminalSpec":
        return cls(TerminalKind.ALL_SINGULAR)

    @classmethod
    def custom(cls, values: Sequence[float], K_c: float = 0.0) -> "TerminalSpec":
        arr = np.asarray(values, dtype=float)
        if np.any(arr < -K_c - 1e-12):
            raise DomainError(f"custom terminal data must stay >= -K_c = {-K_c}")
        return cls(TerminalKind.CUSTOM, K_c=K_c, values=tuple(arr.tolist()))

    def evaluate(self, x: np.ndarray, trunc_n: float) -> np.ndarray:
        """Terminal data truncated at level trunc_n."""
        if self.kind is TerminalKind.CONSTANT_NEG:
            return np.full_like(x, -self.K_c)
        if self.kind is TerminalKind.ALL_SINGULAR:
            return np.full_like(x, float(trunc_n))
        if self.kind is TerminalKind.CUSTOM:
            arr = np.asarray(self.values, dtype=float)
            if arr.shape != x.shape:
                raise DomainError(f"custom terminal has {arr.size} values, grid has {x.size} nodes")
            return np.minimum(arr, trunc_n)
        out = np.where(x >= self.ell, float(trunc_n), -self.K_c)
        if self.mollify_m:
            lo = self.ell - 1.0 / self.mollify_m
            ramp = (x > lo) & (x < self.ell)
            out = np.where(ramp, -self.K_c + (trunc_n + self.K_c) * (x - lo) * self.mollify_m, out)
        return out


@dataclass(frozen=True)
class TruncationCertificate:
    schedule: Tuple[float, ...]
    deltas: Tuple[float, ...]
    monotone: bool
    min_increment: float
    n_final: float
    converged: bool

    def as_dict(self) -> dict:
        return {
            "schedule": list(self.schedule),
            "deltas": list(self.deltas),
            "monotone": self.monotone,
            "min_increment": self.min_increment,
            "n_final": self.n_final,
            "converged": self.converged,
        }


@dataclass(frozen=True, eq=False)
class Grid1D:
    t: np.ndarray
    x: np.ndarray
    values: np.ndarray
    trunc_level: float
    p: float = 2.0
    vol: float = 1.0
    label: str = ""
    certificate: Optional[TruncationCertificate] = None
    detrunc_n: Optional[float] = None
    horizon: Optional[float] = None

    @property
    def terminal_time(self) -> float:
        """Liquidation horizon; differs from the last level for grids ending before it."""
        return float(self.horizon) if self.horizon is not None else float(self.t[-1])

    @property
    def nt(self) -> int:
        return self.t.size - 1

    @property
    def nx(self) -> int:
        return self.x.size

    @property
    def T(self) -> float:
        return float(self.t[-1])

    @property
    def x_min(self) -> float:
        return float(self.x[0])

    @property
    def x_max(self) -> float:
        return float(self.x[-1])

    def level_index(self, t: float) -> int:
        idx = int(np.argmin(np.abs(self.t - t)))
        return idx

    def node_index(self, x: float) -> int:
        return int(np.argmin(np.abs(self.x - x)))

    @cached_property
    def _interp(self) -> RegularGridInterpolator:
        return RegularGridInterpolator((self.t, self.x), self.values, method="linear", bounds_error=False, fill_value=None)

    def value_at(self, t, x) -> np.ndarray:
        """Bilinear value; x is clamped to the grid, t to [t_0, T]."""
        tt = np.clip(np.asarray(t, dtype=float), self.t[0], self.t[-1])
        xx = np.clip(np.asarray(x, dtype=float), self.x[0], self.x[-1])
        tt, xx = np.broadcast_arrays(tt, xx)
        return self._interp(np.stack([tt.ravel(), xx.ravel()], axis=-1)).reshape(tt.shape)

    @cached_property
    def _rate_interp(self) -> RegularGridInterpolator:
        return RegularGridInterpolator((self.t, self.x), self.rate_table(), method="linear", bounds_error=False, fill_value=None)

    def rate_table(self) -> np.ndarray:
        """(T - t) times the feedback rate (p-1) vol |u|^(p-1) sgn(u) at every node.

        The blow-up profile maps to 1, so the table stays bounded up to T. Truncation
        residue of singular solves is removed through the exact reaction flow.
        """
        u = np.array(self.values, dtype=float)
        H = self.terminal_time
        tau = (H - self.t)[:, None]
        p = self.p
        if self.detrunc_n is not None:
            n = float(self.detrunc_n)
            pos = (u > 0.0) & (u < n * (1.0 - 1e-12))
            with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                base = np.where(pos, u, 1.0) ** (1.0 - p) - n ** (1.0 - p)
                fixed = np.where(base > 0.0, base, np.inf) ** (-1.0 / (p - 1.0))
            u = np.where(pos, fixed, u)
        with np.errstate(over="ignore", invalid="ignore"):
            rate = (p - 1.0) * self.vol * np.abs(u) ** (p - 1.0) * np.sign(u)
            table = tau * rate
        if self.t[-1] >= H:
            n_top = self.detrunc_n if self.detrunc_n is not None else self.trunc_level
            last = self.values[-1]
            singular_top = last >= n_top * (1.0 - 1e-12) if math.isfinite(n_top) else np.zeros(last.shape, dtype=bool)
            table[-1] = np.where(singular_top, 1.0, 0.0)
        # saturated de-truncation sits on the blow-up profile
        return np.where(np.isfinite(table), table, 1.0)

    def rate_weight_at(self, t, x) -> np.ndarray:
        tt = np.clip(np.asarray(t, dtype=float), self.t[0], self.t[-1])
        xx = np.clip(np.asarray(x, dtype=float), self.x[0], self.x[-1])
        tt, xx = np.broadcast_arrays(tt, xx)
        return self._rate_interp(np.stack([tt.ravel(), xx.ravel()], axis=-1)).reshape(tt.shape)


@dataclass
class RecursionState:
    """Regime-4 value sequence: u1[n-1] is the trading value with budget n, u0[n-1] the paused one."""

    u1: List[Grid1D]
    u0: List[Grid1D]
    u_inf: Grid1D
    ell: float
    b: float
    delta: float
    K_c: float
    increments: List[float] = field(default_factory=list)
    direction: str = "constant"
    reentry: str = "optional"

    @property
    def n(self) -> int:
        return len(self.u1)


# --------------------------------------------------------------------------- axes


def build_axis(spec: GridSpec1D, anchors: Sequence[float] = ()) -> np.ndarray:
    """Uniform axis with every anchor sitting on a node (anchors must lie inside the domain)."""
    anchors = sorted(float(a) for a in (tuple(anchors) or spec.anchors))
    if not anchors:
        return np.linspace(spec.x_min, spec.x_max, spec.nx)
    dx0 = (spec.x_max - spec.x_min) / (spec.nx - 1)
    a0 = anchors[0]
    if len(anchors) > 1:
        span = anchors[-1] - a0
        m = max(1, int(round(span / dx0)))
        dx = span / m
    else:
        dx = dx0
    j0 = int(round((a0 - spec.x_min) / dx))
    j0 = min(max(j0, 0), spec.nx - 1)
    x = a0 + dx * (np.arange(spec.nx) - j0)
    for a in anchors:
        j = j0 + int(round((a - a0) / dx))
        if 0 <= j < spec.nx:
            x[j] = a
    return x


def build_time_axis(spec: GridSpec1D, breakpoints: Sequence[float] = ()) -> np.ndarray:
    """Stored levels on [t_start, T]; each breakpoint becomes a level, spacing near-uniform."""
    pts = sorted({spec.t_start, spec.T, *[float(b) for b in (tuple(breakpoints) or spec.breakpoints) if spec.t_start < b < spec.T]})
    span = spec.T - spec.t_start
    pieces = []
    for lo, hi in zip(pts[:-1], pts[1:]):
        n_piece = max(1, int(round(spec.nt * (hi - lo) / span)))
        piece = np.linspace(lo, hi, n_piece + 1)
        pieces.append(piece if not pieces else piece[1:])
    return np.concatenate(pieces)


def substeps(t_hi: float, t_lo: float, T: float, ratio: float, floor: float) -> List[float]:
    """Backward sub-step sizes from t_hi down to t_lo; dt ~ ratio * (T - t), never below floor."""
    out: List[float] = []
    t = t_hi
    while t - t_lo > 1e-14 * max(T, 1.0):
        dt = max(ratio * (T - t), floor)
        if t - dt - t_lo < 0.5 * dt:
            dt = t - t_lo
        out.append(dt)
        t -= dt
    return out


def _reaction_floor(p: float, vol_hi: float, n_level: float, ratio: float, T: float) -> float:
    scale = max(abs(n_level), 1.0) ** (p - 1.0) * max(vol_hi, 1e-12) * (p - 1.0)
    return max(ratio / scale, 1e-12 * T)


# --------------------------------------------------------------------------- kernels


def reaction_flow(u: np.ndarray, weight: np.ndarray, p: float, dt: float) -> np.ndarray:
    """Exact flow of du/dtau = -weight |u|^p over dtau = dt (weight >= 0 nodewise)."""
    c = (p - 1.0) * weight * dt
    out = np.array(u, dtype=float)
    pos = u > 0.0
    neg = u < 0.0
    with np.errstate(divide="ignore", over="ignore"):
        if np.any(pos):
            up = u[pos]
            out[pos] = (up ** (1.0 - p) + c[pos]) ** (-1.0 / (p - 1.0))
        if np.any(neg):
            w = -u[neg]
            bracket = w ** (1.0 - p) - c[neg]
            if np.any(bracket <= 0.0):
                raise AssumptionViolated("lower_bound_finite", float(np.min(bracket)), "negative part exploded during the march")
            out[neg] = -(bracket ** (-1.0 / (p - 1.0)))
    return out


def reaction_explicit(u: np.ndarray, weight: np.ndarray, p: float, dt: float) -> np.ndarray:
    return u - dt * weight * np.abs(u) ** p


def diffusion_banded(x: np.ndarray, coef: np.ndarray, dt: float) -> np.ndarray:
    """Banded matrix of (I - dt * 0.5 coef d_xx) with identity rows at both ends.

    An identity row either carries a Dirichlet value or, when free, means zero
    curvature at the artificial boundary (the node only feels the reaction).
    """
    n = x.size
    h = np.diff(x)
    hl, hr = h[:-1], h[1:]
    a = 0.5 * coef[1:-1] * dt
    lower = -a * 2.0 / (hl * (hl + hr))
    upper = -a * 2.0 / (hr * (hl + hr))
    ab = np.zeros((3, n))
    ab[1, :] = 1.0
    ab[1, 1:-1] = 1.0 - lower - upper
    ab[0, 2:] = upper
    ab[2, :-2] = lower
    return ab


@dataclass(frozen=True)
class _MarchPlan:
    x: np.ndarray
    t: np.ndarray
    p: float
    vol: VolFn
    diffusion: float
    ratio: float
    floor: float
    weight_mask: Optional[np.ndarray] = None
    left: Optional[BoundaryFn] = None
    right: Optional[BoundaryFn] = None
    linear: bool = False
    explicit_reaction: bool = False
    horizon: Optional[float] = None


def march(plan: _MarchPlan, terminal: np.ndarray) -> np.ndarray:
    """Backward march of u_t + 0.5 d * u_xx - vol |u|^p = 0 from the last level of plan.t."""
    t = plan.t
    x = plan.x
    values = np.empty((t.size, x.size))
    u = np.array(terminal, dtype=float)
    if plan.left is not None:
        u[0] = plan.left(t[-1])
    if plan.right is not None:
        u[-1] = plan.right(t[-1])
    values[-1] = u
    coef = np.full(x.size, plan.diffusion)
    horizon = float(t[-1]) if plan.horizon is None else plan.horizon
    react = reaction_explicit if plan.explicit_reaction else reaction_flow
    for j in range(t.size - 1, 0, -1):
        t_hi = float(t[j])
        for dt in substeps(t_hi, float(t[j - 1]), horizon, plan.ratio, plan.floor):
            if not plan.linear:
                w = plan.vol(t_hi, x)
                if plan.weight_mask is not None:
                    w = w * plan.weight_mask
                u = react(u, w, plan.p, dt)
            t_lo = t_hi - dt
            ab = diffusion_banded(x, coef, dt)
            rhs = u
            if plan.left is not None:
                rhs[0] = plan.left(t_lo)
            if plan.right is not None:
                rhs[-1] = plan.right(t_lo)
            u = solve_banded((1, 1), ab, rhs, check_finite=False)
            t_hi = t_lo
        if plan.left is not None:
            u[0] = plan.left(float(t[j - 1]))
        if plan.right is not None:
            u[-1] = plan.right(float(t[j - 1]))
        values[j - 1] = u
    return values


def _check_envelope(values: np.ndarray, t: np.ndarray, p: float, vol_lo: float, T: float) -> None:
    if not np.all(np.isfinite(values)):
        raise InstabilityDetected("non-finite value in the solution grid")
    if vol_lo <= 0.0:
        return
    inner = t < T
    tau = T - t[inner]
    envelope = ((p - 1.0) * vol_lo * tau) ** (-1.0 / (p - 1.0))
    peak = values[inner].max(axis=1)
    bad = peak > 10.0 * envelope
    if np.any(bad):
        j = int(np.flatnonzero(bad)[0])
        raise InstabilityDetected(f"value {peak[j]:.4g} exceeds 10x blow-up envelope {envelope[j]:.4g} at t={t[inner][j]:.4g}")


def _vol_range(vol: VolFn, t: np.ndarray, x: np.ndarray) -> Tuple[float, float]:
    samples = np.concatenate([np.asarray(vol(float(tj), x), dtype=float) for tj in t[:: max(1, t.size // 8)]])
    return float(samples.min()), float(samples.max())


# --------------------------------------------------------------------------- solves


def solve_truncated(
    spec: GridSpec1D,
    terminal: TerminalSpec,
    trunc_n: float,
    p: float = 2.0,
    vol: Union[float, VolFn] = 1.0,
    *,
    floor_level: Optional[float] = None,
    weight_mask: Optional[np.ndarray] = None,
    left: Optional[BoundaryFn] = None,
    right: Optional[BoundaryFn] = None,
    x: Optional[np.ndarray] = None,
    t: Optional[np.ndarray] = None,
    label: str = "",
) -> Grid1D:
    """Backward solve with terminal min(Phi, trunc_n)."""
    if trunc_n < -terminal.K_c:
        raise DomainError(f"trunc_n={trunc_n} must be >= -K_c={-terminal.K_c}")
    vol_fn = as_vol_fn(vol)
    x = build_axis(spec) if x is None else x
    t = build_time_axis(spec) if t is None else t
    u_T = terminal.evaluate(x, trunc_n)
    vol_lo, vol_hi = _vol_range(vol_fn, t, x)
    level = floor_level if floor_level is not None else max(float(np.max(np.abs(u_T))), 1.0)
    plan = _MarchPlan(
        x=x,
        t=t,
        p=p,
        vol=vol_fn,
        diffusion=1.0,
        ratio=spec.substep_ratio,
        floor=_reaction_floor(p, vol_hi, level, spec.substep_ratio, spec.T),
        weight_mask=weight_mask,
        left=left,
        right=right,
        explicit_reaction=spec.explicit_reaction,
    )
    values = march(plan, u_T)
    _check_envelope(values, t, p, vol_lo, spec.T)
    logger.debug(f"solve_truncated n={trunc_n:.3g} label={label or terminal.kind.value} min={values.min():.4g}")
    return Grid1D(
        t=t,
        x=x,
        values=values,
        trunc_level=float(trunc_n),
        p=p,
        vol=getattr(vol_fn, "constant", vol_hi),
        label=label or terminal.kind.value,
    )


def _relative_delta(new: np.ndarray, old: np.ndarray, rows: np.ndarray) -> float:
    diff = np.abs(new[rows] - old[rows]) / (1.0 + np.abs(new[rows]))
    return float(diff.max()) if diff.size else 0.0


def run_truncation_schedule(
    build: Callable[[float, float], Grid1D],
    schedule: Sequence[float],
    tol: float,
    t_cut: float,
    label: str,
) -> Grid1D:
    """Run build(n, n_max) over an increasing schedule until the relative sup change is below tol."""
    schedule = tuple(sorted(float(n) for n in schedule))
    if not schedule:
        raise DomainError("truncation schedule is empty")
    n_max = schedule[-1]
    prev: Optional[Grid1D] = None
    deltas: List[float] = []
    monotone = True
    min_inc = math.inf
    for n in schedule:
        grid = build(n, n_max)
        if prev is not None:
            inc = grid.values - prev.values
            slack = MONOTONE_ATOL + MONOTONE_RTOL * np.abs(grid.values)
            min_inc = min(min_inc, float(inc.min()))
            if np.any(inc < -slack):
                monotone = False
                logger.warning(f"⚠️ {label}: truncation sequence not monotone at n={n:.0e} (min increment {inc.min():.3e})")
            rows = np.flatnonzero(grid.t <= grid.T - t_cut + 1e-12)
            delta = _relative_delta(grid.values, prev.values, rows)
            deltas.append(delta)
            logger.debug(f"{label}: n={n:.0e} delta={delta:.3e}")
            if delta < tol:
                cert = TruncationCertificate(schedule, tuple(deltas), monotone, min_inc, n, True)
                logger.info(f"✅ {label}: converged at n={n:.0e} (delta {delta:.2e})")
                return replace(grid, trunc_level=math.inf, certificate=cert, detrunc_n=n)
        prev = grid
    raise NoConvergence(deltas[-1] if deltas else math.inf, deltas)


def solve_singular(
    spec: GridSpec1D,
    terminal: TerminalSpec,
    p: float = 2.0,
    vol: Union[float, VolFn] = 1.0,
    tol: float = 1e-3,
    schedule: Sequence[float] = DEFAULT_SCHEDULE,
) -> Grid1D:
    """Minimal solution as the limit of truncated solves."""
    if not terminal.singular:
        raise DomainError(f"terminal {terminal.kind.value} has no singular part")
    anchors = spec.anchors or ((terminal.ell,) if terminal.kind is TerminalKind.THRESHOLD_SINGULAR and spec.x_min < terminal.ell < spec.x_max else ())
    x = build_axis(spec, anchors)
    t = build_time_axis(spec)

    def _build(n: float, n_max: float) -> Grid1D:
        return solve_truncated(spec, terminal, n, p, vol, floor_level=n_max, x=x, t=t, label=terminal.kind.value)

    return run_truncation_schedule(_build, schedule, tol, spec.t_cut, f"singular[{terminal.kind.value}]")


def with_anchor(spec: GridSpec1D, ell: float) -> GridSpec1D:
    if ell in spec.anchors:
        return spec
    return replace(spec, anchors=tuple(sorted((*spec.anchors, ell))))


def _regime2_axes(spec: GridSpec1D, ell: float) -> Tuple[np.ndarray, np.ndarray]:
    if spec.x_min > ell or spec.x_max <= ell:
        raise DomainError(f"threshold ell={ell} must lie in [x_min, x_max) = [{spec.x_min}, {spec.x_max})")
    full = build_axis(with_anchor(spec, ell))
    j = int(np.argmin(np.abs(full - ell)))
    x = full[j:].copy()
    x[0] = ell
    return x, build_time_axis(spec)


def solve_regime2(
    spec: GridSpec1D,
    K_c: float,
    ell: float,
    p: float = 2.0,
    vol: Union[float, VolFn] = 1.0,
    tol: float = 1e-3,
    schedule: Sequence[float] = DEFAULT_SCHEDULE,
) -> Grid1D:
    """Stop-at-hit value on [t_start, T] x [ell, x_max] with u(t, ell) = -K_c."""
    x, t = _regime2_axes(spec, ell)
    terminal = TerminalSpec.threshold(K_c, ell)
    wall = lambda _t: -K_c  # noqa: E731

    def _build(n: float, n_max: float) -> Grid1D:
        return solve_truncated(spec, terminal, n, p, vol, floor_level=n_max, left=wall, x=x, t=t, label="regime2")

    grid = run_truncation_schedule(_build, schedule, tol, min(spec.t_cut, 0.5 * (spec.T - spec.t_start)), "regime2")
    return replace(grid, label="regime2")


def regime_indicator(x: np.ndarray, ell: float, smooth_eps: Optional[float] = None) -> np.ndarray:
    """1_{x > ell}, or its piecewise-linear smoothing over (ell, ell + eps]."""
    if smooth_eps:
        return np.clip((x - ell) / smooth_eps, 0.0, 1.0)
    return (x > ell).astype(float)


def solve_regime3(
    spec: GridSpec1D,
    K_c: float,
    ell: float,
    delta: float,
    p: float = 2.0,
    vol: Union[float, VolFn] = 1.0,
    tol: float = 1e-3,
    schedule: Sequence[float] = DEFAULT_SCHEDULE,
    smooth_eps: Optional[float] = None,
) -> Tuple[Grid1D, Grid1D]:
    """Two-stage pause-below value: (u_inf on [T-delta, T] x [ell, x_max], v on [0, T-delta] x full line)."""
    if not 0.0 < delta <= spec.T - spec.t_start:
        raise DomainError(f"delta must lie in (0, T], got {delta}")
    t_split = spec.T - delta
    stage1 = with_anchor(replace(spec, t_start=t_split, nt=max(1, int(round(spec.nt * delta / spec.T))), breakpoints=()), ell)
    u_inf = solve_regime2(stage1, K_c, ell, p, vol, tol, schedule)
    u_inf = replace(u_inf, label="regime3_u_inf")

    full_x = build_axis(stage1)
    g = np.full(full_x.size, -K_c)
    above = full_x > ell
    g[above] = u_inf.values[0][np.searchsorted(u_inf.x, full_x[above])]
    if t_split <= spec.t_start + 1e-14:
        v = Grid1D(
            t=np.array([t_split]),
            x=full_x,
            values=g[None, :].copy(),
            trunc_level=math.inf,
            p=p,
            vol=u_inf.vol,
            label="regime3_v",
            horizon=spec.T,
        )
        return u_inf, v

    stage2 = replace(spec, T=t_split, nt=max(1, spec.nt - stage1.nt), breakpoints=())
    mask = regime_indicator(full_x, ell, smooth_eps)
    v = solve_truncated(
        stage2,
        TerminalSpec(TerminalKind.CUSTOM, K_c=K_c, values=tuple(g.tolist())),
        math.inf,
        p,
        vol,
        floor_level=float(np.max(np.abs(g))),
        weight_mask=mask,
        x=full_x,
        label="regime3_v",
    )
    return u_inf, replace(v, trunc_level=math.inf, detrunc_n=u_inf.detrunc_n, horizon=spec.T)


def regime4_spec(spec: GridSpec1D, ell: float, delta: float, b: float) -> GridSpec1D:
    bps = (spec.T - delta,) if 0.0 < delta < spec.T else ()
    return replace(spec, anchors=(ell, ell + b), breakpoints=bps)


def _boundary_from(grid: Grid1D, node: int) -> BoundaryFn:
    return _column_boundary(grid.t, grid.values[:, node])


def _column_boundary(ts: np.ndarray, values: np.ndarray) -> BoundaryFn:
    col = np.array(values, dtype=float)

    def _fn(t: float) -> float:
        return float(np.interp(t, ts, col))

    return _fn


def solve_regime4(
    spec: GridSpec1D,
    K_c: float,
    ell: float,
    delta: float,
    b: float,
    n_switches: Optional[int] = 5,
    p: float = 2.0,
    vol: Union[float, VolFn] = 1.0,
    tol: float = 1e-3,
    schedule: Sequence[float] = DEFAULT_SCHEDULE,
    max_switches: int = 50,
    reentry: str = "optional",
) -> RecursionState:
    """Coupled recursion u_{1,1} -> u_{0,1} -> u_{1,2} -> ... for the pause-with-buffer regime.

    u_{1,1} is the stop-at-hit solution itself, so every later u_{1,n} shares its
    [T - delta, T] slab. Later levels are marched on the same sub-steps as the
    stop-at-hit solve. Under optional re-entry the paused value at ell + b is
    min(u_{1,n}, -K_c) and the sequence is non-increasing nodewise; forced
    re-entry takes u_{1,n} as is and its direction is only recorded. With
    n_switches=None the recursion runs until the sup increment drops below tol
    (at most max_switches levels).
    """
    if b <= 0.0:
        raise DomainError(f"re-entry buffer b must be > 0, got {b}")
    if reentry not in REENTRY_POLICIES:
        raise DomainError(f"reentry must be one of {REENTRY_POLICIES}, got {reentry!r}")
    if not 0.0 <= delta < spec.T:
        raise DomainError(f"delta must lie in [0, T), got {delta}")
    if spec.x_max <= ell + b:
        raise DomainError(f"x_max={spec.x_max} must exceed ell + b = {ell + b}")
    r4 = regime4_spec(spec, ell, delta, b)
    vol_fn = as_vol_fn(vol)
    u11 = solve_regime2(r4, K_c, ell, p, vol_fn, tol, schedule)
    x1, t = u11.x, u11.t
    full = build_axis(r4)
    j_top = int(np.argmin(np.abs(full - (ell + b))))
    x0 = full[: j_top + 1].copy()
    x0[-1] = ell + b
    j_split = int(np.argmin(np.abs(t - (spec.T - delta))))
    t_low = t[: j_split + 1]
    node_b_in_x1 = int(np.argmin(np.abs(x1 - (ell + b))))
    node_ell_in_x0 = int(np.argmin(np.abs(x0 - ell)))
    vol_lo, vol_hi = _vol_range(vol_fn, t, x1)
    floor = _reaction_floor(p, vol_hi, max(schedule), r4.substep_ratio, spec.T)
    slab = u11.values[j_split:]
    terminal_split = slab[0].copy()

    u1: List[Grid1D] = [replace(u11, label="u1_1")]
    u0: List[Grid1D] = []
    increments: List[float] = []
    limit = int(n_switches) if n_switches is not None else max_switches
    n = 1
    while True:
        lateral = u1[-1].values[: j_split + 1, node_b_in_x1]
        if reentry == "optional":
            lateral = np.minimum(lateral, -K_c)
        rhs_b = _column_boundary(t_low, lateral)
        lin = _MarchPlan(x=x0, t=t_low, p=p, vol=vol_fn, diffusion=1.0, ratio=r4.substep_ratio, floor=floor,
                         right=rhs_b, linear=True, horizon=spec.T)
        u0_vals = march(lin, np.full(x0.size, -K_c))
        u0.append(Grid1D(t=t_low, x=x0, values=u0_vals, trunc_level=math.inf, p=p, vol=u11.vol, label=f"u0_{n}",
                         horizon=spec.T))
        if n >= limit:
            break
        nl = _MarchPlan(x=x1, t=t_low, p=p, vol=vol_fn, diffusion=1.0, ratio=r4.substep_ratio, floor=floor,
                        left=_boundary_from(u0[-1], node_ell_in_x0), horizon=spec.T,
                        explicit_reaction=r4.explicit_reaction)
        low_vals = march(nl, terminal_split)
        _check_envelope(low_vals, t_low, p, vol_lo, spec.T)
        nxt = replace(u11, values=np.concatenate([low_vals[:-1], slab], axis=0), label=f"u1_{n + 1}")
        inc = float(np.max(np.abs(nxt.values - u1[-1].values)))
        increments.append(inc)
        u1.append(nxt)
        n += 1
        logger.debug(f"regime4: u1_{n} increment {inc:.3e}")
        if n_switches is None and inc < tol:
            break

    diffs = [u1[i + 1].values - u1[i].values for i in range(len(u1) - 1)]
    direction = _direction(diffs)
    if reentry == "optional" and direction not in ("non_increasing", "constant"):
        logger.warning(f"⚠️ regime4: optional re-entry should give a non-increasing sequence, got {direction}")
    logger.info(f"✅ regime4: {len(u1)} trading levels, increments {[f'{d:.2e}' for d in increments]}, {direction}")
    state = RecursionState(u1=u1, u0=u0, u_inf=replace(u11, t=t[j_split:], values=slab.copy(), label="u_inf"),
                           ell=ell, b=b, delta=delta, K_c=K_c, increments=increments, direction=direction,
                           reentry=reentry)
    return state


def _direction(diffs: List[np.ndarray], atol: float = 1e-10) -> str:
    if not diffs:
        return "constant"
    up = all(np.all(d >= -atol) for d in diffs)
    down = all(np.all(d <= atol) for d in diffs)
    if up and down:
        return "constant"
    if down:
        return "non_increasing"
    if up:
        return "non_decreasing"
    return "mixed"


def optimal_rate_1d(u_value, q, p: float, vol):
    """Feedback trading rate -(p-1) vol |u|^(p-1) sgn(u) q; zero where u = 0."""
    u = np.asarray(u_value, dtype=float)
    out = -(p - 1.0) * np.asarray(vol, dtype=float) * np.abs(u) ** (p - 1.0) * np.sign(u) * np.asarray(q, dtype=float)
    return float(out) if np.ndim(out) == 0 else out
