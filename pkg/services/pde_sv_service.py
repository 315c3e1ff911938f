# services/pde_sv_service.py
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import solve_banded

from services.errors import DomainError, InstabilityDetected
from services.model_service import SVParams
from services.pde_1d_service import (
    DEFAULT_SCHEDULE,
    Grid1D,
    GridSpec1D,
    TerminalKind,
    TerminalSpec,
    TruncationCertificate,
    build_axis,
    build_time_axis,
    optimal_rate_1d,
    reaction_flow,
    run_truncation_schedule,
    substeps,
)

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

VolFn2D = Callable[[float, np.ndarray, np.ndarray], np.ndarray]

SCHEMES = ("split", "explicit")


def vol_inverse_nu(vol_bar: float = 1.0) -> VolFn2D:
    """Smooth bounded liquidity fixture vol(nu, s) = vol_bar / (1 + nu)."""

    def _vol(t: float, nu: np.ndarray, s: np.ndarray) -> np.ndarray:
        return vol_bar / (1.0 + nu) + 0.0 * s

    return _vol


def _as_vol2d(vol: Union[float, VolFn2D]) -> VolFn2D:
    if callable(vol):
        return vol
    value = float(vol)

    def _vol(t: float, nu: np.ndarray, s: np.ndarray) -> np.ndarray:
        return np.full(np.broadcast(nu, s).shape, value)

    return _vol


@dataclass(frozen=True)
class GridSpec2D:
    s_min: float = -6.0
    s_max: float = 6.0
    ns: int = 96
    n_nu: int = 96
    nt: int = 400
    T: float = 1.0
    t_cut: float = 0.05
    substep_ratio: float = 0.25
    nu_max: Optional[float] = None
    scheme: str = "split"
    cfl: float = 0.45
    max_substeps: int = 200_000

    def __post_init__(self) -> None:
        if self.scheme not in SCHEMES:
            raise DomainError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.ns < 50 or self.n_nu < 3:
            raise DomainError(f"grid too coarse: ns={self.ns} (>= 50), n_nu={self.n_nu} (>= 3)")

    def as_1d(self) -> GridSpec1D:
        return GridSpec1D(x_min=self.s_min, x_max=self.s_max, nx=self.ns, nt=self.nt, T=self.T,
                          t_cut=self.t_cut, substep_ratio=self.substep_ratio)


@dataclass(frozen=True, eq=False)
class Grid2D:
    t: np.ndarray
    nu: np.ndarray
    s: np.ndarray
    values: np.ndarray
    trunc_level: float
    p: float = 2.0
    label: str = "sv"
    certificate: Optional[TruncationCertificate] = None
    detrunc_n: Optional[float] = None

    @property
    def T(self) -> float:
        return float(self.t[-1])

    @property
    def nt(self) -> int:
        return self.t.size - 1

    def nu_index(self, nu: float) -> int:
        return int(np.argmin(np.abs(self.nu - nu)))

    def slice_nu(self, nu: float) -> Grid1D:
        """(t, s) section at the variance node closest to nu."""
        j = self.nu_index(nu)
        return Grid1D(t=self.t, x=self.s, values=self.values[:, j, :].copy(), trunc_level=self.trunc_level,
                      p=self.p, label=f"{self.label}@nu={self.nu[j]:.4g}", certificate=self.certificate,
                      detrunc_n=self.detrunc_n)


def build_nu_axis(sv: SVParams, n_nu: int, nu_max: Optional[float] = None) -> np.ndarray:
    """Variance nodes on (0, nu_max] with nu0 on a node and no node at zero."""
    top = float(nu_max) if nu_max is not None else sv.nu_max
    top = max(top, sv.nu0)
    d_nu = top / n_nu
    m = min(max(1, int(round(sv.nu0 / d_nu))), n_nu)
    d_nu = sv.nu0 / m
    axis = d_nu * np.arange(1, n_nu + 1)
    axis[m - 1] = sv.nu0
    return axis


@dataclass(frozen=True)
class _Operator:
    nu: np.ndarray
    s: np.ndarray
    sv: SVParams
    scheme: str

    @property
    def d_nu(self) -> float:
        return float(self.nu[1] - self.nu[0])

    @property
    def d_s(self) -> float:
        return float(np.min(np.diff(self.s)))

    def cfl_dt(self, cfl: float) -> float:
        sv = self.sv
        nu_top = float(self.nu[-1])
        rate = (
            sv.c**2 * nu_top / self.d_nu**2
            + sv.alpha * float(np.max(np.abs(sv.theta - self.nu))) / self.d_nu
            + sv.c * nu_top * abs(sv.rho) / (2.0 * self.d_nu * self.d_s)
        )
        if self.scheme == "explicit":
            rate += nu_top / self.d_s**2
        return cfl / rate if rate > 0.0 else math.inf

    def explicit_terms(self, U: np.ndarray) -> np.ndarray:
        """Variance diffusion, upwind mean reversion and the mixed term (plus s-diffusion when fully explicit)."""
        sv = self.sv
        nu = self.nu[:, None]
        d_nu, s = self.d_nu, self.s
        out = np.zeros_like(U)

        u_nn = np.zeros_like(U)
        u_nn[1:-1] = (U[2:] - 2.0 * U[1:-1] + U[:-2]) / d_nu**2
        out += 0.5 * sv.c**2 * nu * u_nn

        drift = sv.alpha * (sv.theta - self.nu)
        fwd = np.zeros_like(U)
        fwd[:-1] = (U[1:] - U[:-1]) / d_nu
        bwd = np.zeros_like(U)
        bwd[1:] = (U[1:] - U[:-1]) / d_nu
        out += np.where(drift[:, None] > 0.0, drift[:, None] * fwd, drift[:, None] * bwd)

        if sv.rho != 0.0:
            mixed = np.zeros_like(U)
            ds2 = (s[2:] - s[:-2])[None, :]
            mixed[1:-1, 1:-1] = (U[2:, 2:] - U[2:, :-2] - U[:-2, 2:] + U[:-2, :-2]) / (2.0 * d_nu * ds2)
            out += sv.c * sv.rho * nu * mixed

        if self.scheme == "explicit":
            h = np.diff(s)
            hl, hr = h[:-1], h[1:]
            u_ss = np.zeros_like(U)
            u_ss[:, 1:-1] = 2.0 * ((U[:, 2:] - U[:, 1:-1]) / hr - (U[:, 1:-1] - U[:, :-2]) / hl) / (hl + hr)
            out += 0.5 * nu * u_ss
        return out

    def implicit_s(self, U: np.ndarray, dt: float) -> np.ndarray:
        """Backward-Euler s-diffusion for every variance row in one block-diagonal banded solve."""
        n_nu, ns = U.shape
        h = np.diff(self.s)
        hl, hr = h[:-1], h[1:]
        a = 0.5 * self.nu[:, None] * dt
        lower = -a * 2.0 / (hl * (hl + hr))[None, :]
        upper = -a * 2.0 / (hr * (hl + hr))[None, :]
        diag = np.ones((n_nu, ns))
        diag[:, 1:-1] = 1.0 - lower - upper
        up = np.zeros((n_nu, ns))
        up[:, 2:] = upper
        lo = np.zeros((n_nu, ns))
        lo[:, :-2] = lower
        ab = np.vstack([up.ravel(), diag.ravel(), lo.ravel()])
        return solve_banded((1, 1), ab, U.ravel(), check_finite=False).reshape(n_nu, ns)


def _march_sv(
    op: _Operator,
    t: np.ndarray,
    terminal: np.ndarray,
    p: float,
    vol: VolFn2D,
    ratio: float,
    floor: float,
    cfl: float,
    max_substeps: int,
) -> np.ndarray:
    nu_g, s_g = np.meshgrid(op.nu, op.s, indexing="ij")
    values = np.empty((t.size, op.nu.size, op.s.size))
    U = np.array(terminal, dtype=float)
    values[-1] = U
    horizon = float(t[-1])
    dt_cfl = op.cfl_dt(cfl)
    total = 0
    for j in range(t.size - 1, 0, -1):
        t_hi = float(t[j])
        for dt_outer in substeps(t_hi, float(t[j - 1]), horizon, ratio, floor):
            n_inner = max(1, int(math.ceil(dt_outer / dt_cfl))) if math.isfinite(dt_cfl) else 1
            total += n_inner
            if total > max_substeps:
                raise InstabilityDetected(
                    f"CFL limit dt={dt_cfl:.3e} needs more than {max_substeps} sub-steps; refine the s/nu grid ratio"
                )
            dt = dt_outer / n_inner
            for _ in range(n_inner):
                U = reaction_flow(U, np.asarray(vol(t_hi, nu_g, s_g), dtype=float), p, dt)
                U = U + dt * op.explicit_terms(U)
                if op.scheme == "split":
                    U = op.implicit_s(U, dt)
                t_hi -= dt
        if not np.all(np.isfinite(U)):
            raise InstabilityDetected(f"non-finite values at t={t[j - 1]:.4g}")
        values[j - 1] = U
    return values


def _check_envelope_2d(values: np.ndarray, t: np.ndarray, p: float, vol_lo: float) -> None:
    if vol_lo <= 0.0:
        return
    T = float(t[-1])
    inner = t < T
    envelope = ((p - 1.0) * vol_lo * (T - t[inner])) ** (-1.0 / (p - 1.0))
    peak = values[inner].reshape(int(inner.sum()), -1).max(axis=1)
    if np.any(peak > 10.0 * envelope):
        j = int(np.flatnonzero(peak > 10.0 * envelope)[0])
        raise InstabilityDetected(f"value {peak[j]:.4g} exceeds 10x blow-up envelope at t={t[inner][j]:.4g}")


def solve_sv(
    spec: GridSpec2D,
    sv: SVParams,
    terminal: TerminalSpec,
    p: float = 2.0,
    vol: Union[float, VolFn2D] = 1.0,
    tol: float = 1e-3,
    schedule: Sequence[float] = DEFAULT_SCHEDULE,
) -> Grid2D:
    """Backward solve of u_t + L u - vol |u|^p = 0 with the Heston-type operator L.

    No data is imposed at the lowest variance row: the mean-reversion drift points
    inward there and is discretized one-sided, so the row is an outflow row.
    """
    vol_fn = _as_vol2d(vol)
    spec1 = spec.as_1d()
    anchors = (terminal.ell,) if terminal.kind is TerminalKind.THRESHOLD_SINGULAR and spec.s_min < terminal.ell < spec.s_max else ()
    s = build_axis(spec1, anchors)
    t = build_time_axis(spec1)
    nu = build_nu_axis(sv, spec.n_nu, spec.nu_max)
    op = _Operator(nu=nu, s=s, sv=sv, scheme=spec.scheme)
    nu_g, s_g = np.meshgrid(nu, s, indexing="ij")
    vol_samples = np.concatenate([np.ravel(vol_fn(float(tj), nu_g, s_g)) for tj in t[:: max(1, t.size // 8)]])
    vol_lo, vol_hi = float(vol_samples.min()), float(vol_samples.max())
    logger.info(f"🔧 sv solve: scheme={spec.scheme} grid {nu.size}x{s.size}x{t.size - 1}, nu in ({nu[0]:.4g}, {nu[-1]:.4g}]")

    def _build(n: float, n_max: float) -> Grid2D:
        row = terminal.evaluate(s, n)
        U_T = np.broadcast_to(row, (nu.size, s.size)).copy()
        level = max(float(np.max(np.abs(U_T))), 1.0) if not terminal.singular else n_max
        floor = max(spec.substep_ratio / ((p - 1.0) * max(vol_hi, 1e-12) * level ** (p - 1.0)), 1e-12 * spec.T)
        values = _march_sv(op, t, U_T, p, vol_fn, spec.substep_ratio, floor, spec.cfl, spec.max_substeps)
        _check_envelope_2d(values, t, p, vol_lo)
        return Grid2D(t=t, nu=nu, s=s, values=values, trunc_level=float(n), p=p)

    if terminal.singular:
        grid = run_truncation_schedule(_build, schedule, tol, spec.t_cut, "sv")
    else:
        grid = _build(math.inf, math.inf)
        grid = replace(grid, trunc_level=math.inf)
    logger.info(f"✅ sv solve finished: u(0) in [{grid.values[0].min():.4g}, {grid.values[0].max():.4g}]")
    return grid


def optimal_rate_sv(u_value, q, p: float, vol_at_state):
    return optimal_rate_1d(u_value, q, p, vol_at_state)
