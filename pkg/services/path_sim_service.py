# services/path_sim_service.py
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from services.errors import DomainError, GridMismatch, NoTrades
from services.model_service import (
    CanonicalParams,
    ModelParams,
    RegimeKind,
    RegimeSpec,
    execution_cost,
    permanent_impact,
    to_canonical,
)
from services.pde_1d_service import Grid1D

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

LIQUIDATION_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class BrownianPath:
    seed: int
    path_index: int
    n_steps: int
    T: float
    w: np.ndarray
    bridge_uniforms: Optional[np.ndarray] = None

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)


@dataclass(frozen=True, eq=False)
class RegimeTrace:
    kind: RegimeKind
    indicator: np.ndarray
    tau_ell: Optional[int]
    switch_times: List[Tuple[int, Optional[int]]]
    n_trades: int
    interval_id: np.ndarray
    terminal_singular: bool


@dataclass(frozen=True)
class ValueSolution:
    """Value grids a simulation needs for one regime.

    primary is the full-horizon value (R0-R2) or the pre-buffer value (R3);
    u_inf is the terminal slab of R3; ladder holds u_{1,1..n} for R4 and
    hold_value (-K_c) is what retiring under optional re-entry costs.
    """

    regime: RegimeSpec
    primary: Optional[Grid1D] = None
    u_inf: Optional[Grid1D] = None
    ladder: Tuple[Grid1D, ...] = ()
    T: float = 1.0
    hold_value: Optional[float] = None


@dataclass(frozen=True, eq=False)
class PathTrajectory:
    t: np.ndarray
    w: np.ndarray
    indicator: np.ndarray
    q: np.ndarray


@dataclass(frozen=True, eq=False)
class PathRecord:
    path_index: int
    seed: int
    regime: str
    fqT: float
    XT: float
    XT_closed_form: float
    A1: float
    A2: float
    A3: float
    A: float
    liquidated: bool
    n_trades: int
    tau_ell: int
    no_trades: bool = False
    q_traj: Optional[np.ndarray] = None
    trajectory: Optional[PathTrajectory] = None

    def as_row(self) -> Dict[str, object]:
        return {
            "path_index": self.path_index,
            "seed": self.seed,
            "regime": self.regime,
            "fqT": self.fqT,
            "XT": self.XT,
            "XT_closed_form": self.XT_closed_form,
            "A1": self.A1,
            "A2": self.A2,
            "A3": self.A3,
            "A": self.A,
            "liquidated": self.liquidated,
            "n_trades": self.n_trades,
            "tau_ell": self.tau_ell,
            "no_trades": self.no_trades,
        }


@dataclass(frozen=True)
class SimSettings:
    seed: int = 20240501
    n_paths: int = 10_000
    n_steps: int = 2000
    antithetic: bool = False
    bridge_correction: bool = False
    dump_path_indices: Tuple[int, ...] = ()
    liquidation_eps: float = LIQUIDATION_EPS
    n_jobs: int = 1
    chunk_size: int = 500


# --------------------------------------------------------------------------- paths


def path_stream(seed: int, stream_index: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream index)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream_index)])))


def gen_path(
    seed: int,
    path_index: int,
    n_steps: int,
    T: float,
    antithetic: bool = False,
    bridge: bool = False,
) -> BrownianPath:
    """Unit-variance Brownian path on n_steps equal steps; W_0 = 0.

    With antithetic pairing, paths 2j and 2j+1 share stream j with opposite signs.
    """
    if n_steps < 100:
        raise DomainError(f"n_steps must be >= 100, got {n_steps}")
    if T <= 0.0:
        raise DomainError(f"T must be > 0, got {T}")
    stream, sign = (path_index // 2, -1.0 if path_index % 2 else 1.0) if antithetic else (path_index, 1.0)
    rng = path_stream(seed, stream)
    dw = rng.standard_normal(n_steps) * math.sqrt(T / n_steps)
    w = np.empty(n_steps + 1)
    w[0] = 0.0
    np.cumsum(sign * dw, out=w[1:])
    uniforms = rng.random(n_steps) if bridge else None
    return BrownianPath(seed=int(seed), path_index=int(path_index), n_steps=int(n_steps), T=float(T), w=w,
                        bridge_uniforms=uniforms)


def bridge_hit_probability(w_a: np.ndarray, w_b: np.ndarray, level: float, dt: float, below: bool = True) -> np.ndarray:
    """Probability that a Brownian bridge between w_a and w_b crosses level within dt."""
    if below:
        da, db = w_a - level, w_b - level
    else:
        da, db = level - w_a, level - w_b
    prob = np.exp(-2.0 * np.clip(da, 0.0, None) * np.clip(db, 0.0, None) / dt)
    return np.where((da < 0.0) | (db < 0.0), 1.0, prob)


def _events(path: BrownianPath, level: float, below: bool, bridge: bool) -> np.ndarray:
    """Boolean per grid index: level breached at that point or inside the step ending there."""
    w = path.w
    hit = (w < level) if below else (w >= level)
    if bridge and path.bridge_uniforms is not None:
        prob = bridge_hit_probability(w[:-1], w[1:], level, path.dt, below=below)
        hit = hit.copy()
        hit[1:] |= path.bridge_uniforms < prob
    return hit


def _first(mask: np.ndarray, start: int) -> Optional[int]:
    idx = np.flatnonzero(mask[start:])
    return int(idx[0]) + start if idx.size else None


def _count_runs(indicator: np.ndarray) -> int:
    ind = indicator.astype(np.int8)
    return int(ind[0] == 1) + int(np.count_nonzero(np.diff(ind) == 1))


def trace_regime(path: BrownianPath, regime: RegimeSpec, bridge: bool = False) -> RegimeTrace:
    """Trading indicator and hitting times of one path under the regime automaton."""
    n = path.n_steps
    t = path.t
    ell = regime.ell
    below = _events(path, ell, True, bridge)
    tau = _first(below, 0)
    indicator = np.ones(n + 1, dtype=np.int8)
    interval_id = np.zeros(n + 1, dtype=np.int32)
    switches: List[Tuple[int, Optional[int]]] = []
    kind = regime.kind
    t_split = path.T - regime.delta
    j_split = int(np.searchsorted(t, t_split - 1e-12 * path.T))

    if kind is RegimeKind.R0_FULL_LIQUIDATION:
        terminal = True
    elif kind is RegimeKind.R1_TERMINAL_THRESHOLD:
        terminal = bool(path.w[-1] >= ell)
    elif kind is RegimeKind.R2_STOP_AT_HIT:
        if tau is not None:
            indicator[tau:] = 0
        terminal = bool(indicator[-1] == 1)
    elif kind is RegimeKind.R3_PAUSE_BELOW:
        indicator[:j_split] = (~below[:j_split]).astype(np.int8)
        late = _first(below, j_split)
        indicator[j_split:] = 1
        if late is not None:
            indicator[late:] = 0
        terminal = bool(indicator[-1] == 1)
    elif kind is RegimeKind.R4_PAUSE_WITH_BUFFER:
        above = _events(path, ell + regime.b, False, bridge)
        budget = regime.n_switches if regime.n_switches is not None else math.inf
        indicator[:] = 0
        interval_id[:] = -1
        pos = 0
        started = 0
        trading = not below[0]
        if trading:
            started = 1
        while pos <= n:
            if trading:
                stop = _first(below, pos)
                end = n + 1 if stop is None else stop
                indicator[pos:end] = 1
                interval_id[pos:end] = started - 1
                if stop is None:
                    break
                switches.append((stop, None))
                if stop >= j_split or started >= budget:
                    break
                trading, pos = False, stop
            else:
                start = _first(above, pos)
                if start is None or start >= j_split:
                    break
                if switches:
                    switches[-1] = (switches[-1][0], start)
                started += 1
                trading, pos = True, start
        terminal = bool(indicator[-1] == 1)
    else:
        raise DomainError(f"unknown regime {kind}")

    if kind is not RegimeKind.R4_PAUSE_WITH_BUFFER:
        interval_id = np.where(indicator == 1, 0, -1).astype(np.int32)
    return RegimeTrace(
        kind=kind,
        indicator=indicator,
        tau_ell=tau,
        switch_times=switches,
        n_trades=_count_runs(indicator),
        interval_id=interval_id,
        terminal_singular=terminal,
    )


def apply_reentry_policy(path: BrownianPath, trace: RegimeTrace, solution: ValueSolution) -> RegimeTrace:
    """Cut an R4 trace at the first return to ell + b where resuming is not cheaper than holding.

    Only optional re-entry is affected; a retired path stays paused to T and is
    never forced to liquidate.
    """
    regime = solution.regime
    if trace.kind is not RegimeKind.R4_PAUSE_WITH_BUFFER or regime.reentry != "optional":
        return trace
    if solution.hold_value is None:
        raise GridMismatch("optional re-entry needs the hold value -K_c")
    n_levels = len(solution.ladder)
    budget = min(regime.n_switches or n_levels, n_levels)
    x_b = regime.ell + regime.b
    for k, (stop, start) in enumerate(trace.switch_times):
        if start is None:
            break
        level = max(budget - int(trace.interval_id[start]), 1)
        resume = float(solution.ladder[level - 1].value_at(path.t[start], x_b))
        if resume < solution.hold_value:
            continue
        indicator = trace.indicator.copy()
        indicator[start:] = 0
        interval_id = trace.interval_id.copy()
        interval_id[start:] = -1
        logger.debug(f"path {path.path_index}: retired at step {start} (resume {resume:.4g} >= hold {solution.hold_value:.4g})")
        return RegimeTrace(
            kind=trace.kind,
            indicator=indicator,
            tau_ell=trace.tau_ell,
            switch_times=trace.switch_times[:k] + [(stop, None)],
            n_trades=_count_runs(indicator),
            interval_id=interval_id,
            terminal_singular=False,
        )
    return trace


# --------------------------------------------------------------------------- position


def _check_solution(solution: ValueSolution, trace: RegimeTrace, path: BrownianPath) -> None:
    if solution.regime.kind is not trace.kind:
        raise GridMismatch(f"value grids solved for {solution.regime.kind.value}, trace is {trace.kind.value}")
    if abs(solution.T - path.T) > 1e-12 * max(1.0, path.T):
        raise GridMismatch(f"grid horizon {solution.T} differs from path horizon {path.T}")
    kind = trace.kind
    if kind is RegimeKind.R4_PAUSE_WITH_BUFFER:
        if not solution.ladder:
            raise GridMismatch("pause-with-buffer simulation needs the u1 ladder")
    elif solution.primary is None:
        raise GridMismatch(f"{kind.value} simulation needs a value grid")
    if kind is RegimeKind.R3_PAUSE_BELOW and solution.u_inf is None:
        raise GridMismatch("pause-below simulation needs the terminal slab")


def _grid_for_steps(solution: ValueSolution, trace: RegimeTrace, t_mid: np.ndarray) -> List[Tuple[Grid1D, np.ndarray]]:
    """Which grid drives each trading step, as (grid, step indices) groups."""
    trading = np.flatnonzero(trace.indicator[:-1] == 1)
    kind = trace.kind
    if kind is RegimeKind.R3_PAUSE_BELOW:
        split = solution.T - solution.regime.delta
        early = trading[t_mid[trading] < split]
        late = trading[t_mid[trading] >= split]
        return [(solution.primary, early), (solution.u_inf, late)]
    if kind is RegimeKind.R4_PAUSE_WITH_BUFFER:
        n_levels = len(solution.ladder)
        budget = solution.regime.n_switches or n_levels
        groups = []
        ids = trace.interval_id[trading]
        for k in np.unique(ids):
            level = max(min(budget, n_levels) - int(k), 1)
            groups.append((solution.ladder[level - 1], trading[ids == k]))
        return groups
    return [(solution.primary, trading)]


def integrate_q(path: BrownianPath, trace: RegimeTrace, solution: ValueSolution, params: Optional[ModelParams] = None) -> np.ndarray:
    """Q_t / q0 along the path under the feedback rate of the solved value.

    Each trading step integrates rate = g / (T - s) with g = (T - s) * rate
    interpolated at the step midpoint, which is exact for the blow-up profile;
    the last step closes the position when the forced-liquidation event holds.
    """
    _check_solution(solution, trace, path)
    n = path.n_steps
    t = path.t
    T = path.T
    t_mid = 0.5 * (t[:-1] + t[1:])
    w_mid = 0.5 * (path.w[:-1] + path.w[1:])
    tau_lo = T - t[:-1]
    tau_hi = T - t[1:]
    log_step = np.zeros(n)
    last = n - 1
    for grid, steps in _grid_for_steps(solution, trace, t_mid):
        if steps.size == 0:
            continue
        g = grid.rate_weight_at(t_mid[steps], w_mid[steps])
        inner = steps != last
        s_in = steps[inner]
        log_step[s_in] = -g[inner] * np.log(tau_lo[s_in] / tau_hi[s_in])
        if not np.all(inner):
            log_step[last] = -g[~inner][0] * path.dt / (T - t_mid[last])
    log_q = np.concatenate([[0.0], np.cumsum(log_step)])
    q = np.exp(log_q)
    if trace.indicator[last] == 1 and trace.terminal_singular:
        q[-1] = 0.0
    return q


# --------------------------------------------------------------------------- accounting


def account_cash(path: BrownianPath, q_traj: np.ndarray, params: ModelParams) -> Tuple[float, float]:
    """Terminal cash by a direct Riemann sum and by the integration-by-parts identity."""
    dt = path.dt
    Q = params.q0 * np.asarray(q_traj, dtype=float)
    w = path.w
    p_hat = params.p_hat

    # direct: trade each slice at the price prevailing during the step
    dQ = np.diff(Q)
    rate = dQ / dt
    kappa = permanent_impact(rate, 0.5 * (Q[:-1] + Q[1:]), params)
    impact = np.concatenate([[0.0], np.cumsum(kappa * dt)])[:-1]
    price = params.S0 + params.sigma * w[:-1] + impact + 0.5 * kappa * dt
    cost = params.eta * np.abs(rate) ** p_hat / params.V ** (p_hat - 1.0)
    xt = float(-np.sum((price * rate + cost) * dt))

    # closed form: Q0 S0 - Q_T S_T + K(|Q_T|^p - |Q_0|^p) + int Q dS_bar - int V L
    Q0, QT = Q[0], Q[-1]
    ito = float(np.sum(Q[:-1] * params.sigma * np.diff(w)))
    cost_total = float(np.sum(execution_cost(np.diff(Q) / dt, params)) * dt)
    impact_T = params.k / (p_hat - 1.0) * (np.abs(QT) ** (p_hat - 2.0) * QT - np.abs(Q0) ** (p_hat - 2.0) * Q0)
    S_T = params.S0 + params.sigma * w[-1] + impact_T
    K = params.K
    xt_cf = float(Q0 * params.S0 - QT * S_T + K * (abs(QT) ** p_hat - abs(Q0) ** p_hat) + ito - cost_total)
    return xt, xt_cf


def decompose_A(path: BrownianPath, q_traj: np.ndarray, params: ModelParams, canon: Optional[CanonicalParams] = None) -> Tuple[float, float, float, float]:
    """Slippage split into permanent impact, price noise and transaction cost parts."""
    q = np.asarray(q_traj, dtype=float)
    fq = float(q[-1])
    closed = 1.0 - fq
    if abs(closed) < 1e-12:
        raise NoTrades(f"path {path.path_index}: no net trading (fqT={fq})")
    canon = canon or to_canonical(params, RegimeSpec())
    dq = np.diff(q)
    A1 = closed
    A2 = float(np.sum(path.w[:-1] * dq) / closed)
    A3 = float(np.sum((dq / path.dt) ** 2) * path.dt / closed)
    A = canon.coef_A1 * A1 - canon.coef_A2 * A2 - canon.coef_A3 * A3
    return A1, A2, A3, float(A)


def direct_A(xt: float, fqT: float, params: ModelParams) -> float:
    """Average execution price relative to S0, from the cash position."""
    sold = params.q0 * (1.0 - fqT)
    return xt / (sold * params.S0) - 1.0


# --------------------------------------------------------------------------- batch


def simulate_path(
    index: int,
    solution: ValueSolution,
    params: ModelParams,
    sim: SimSettings,
    canon: CanonicalParams,
) -> PathRecord:
    path = gen_path(sim.seed, index, sim.n_steps, params.T, sim.antithetic, sim.bridge_correction)
    trace = trace_regime(path, solution.regime, sim.bridge_correction)
    trace = apply_reentry_policy(path, trace, solution)
    q = integrate_q(path, trace, solution, params)
    xt, xt_cf = account_cash(path, q, params)
    try:
        A1, A2, A3, A = decompose_A(path, q, params, canon)
        no_trades = False
    except NoTrades:
        A1, A2, A3, A = 0.0, math.nan, math.nan, math.nan
        no_trades = True
    keep = index in sim.dump_path_indices
    return PathRecord(
        path_index=index,
        seed=sim.seed,
        regime=solution.regime.kind.value,
        fqT=float(q[-1]),
        XT=xt,
        XT_closed_form=xt_cf,
        A1=A1,
        A2=A2,
        A3=A3,
        A=A,
        liquidated=bool(q[-1] < sim.liquidation_eps),
        n_trades=trace.n_trades,
        tau_ell=-1 if trace.tau_ell is None else int(trace.tau_ell),
        no_trades=no_trades,
        q_traj=q if keep else None,
        trajectory=PathTrajectory(t=path.t, w=path.w, indicator=trace.indicator, q=q) if keep else None,
    )


def _run_chunk(indices: Sequence[int], solution: ValueSolution, params: ModelParams, sim: SimSettings,
               canon: CanonicalParams) -> List[PathRecord]:
    return [simulate_path(i, solution, params, sim, canon) for i in indices]


def run_batch(solution: ValueSolution, params: ModelParams, sim: SimSettings) -> List[PathRecord]:
    """Simulate n_paths paths; records come back in path-index order for any n_jobs."""
    if sim.n_paths <= 0:
        return []
    canon = to_canonical(params, solution.regime)
    chunks = [list(range(lo, min(lo + sim.chunk_size, sim.n_paths))) for lo in range(0, sim.n_paths, sim.chunk_size)]
    logger.info(f"🔧 simulating {sim.n_paths} paths ({len(chunks)} chunks, n_jobs={sim.n_jobs}, regime {solution.regime.kind.value})")
    if sim.n_jobs == 1:
        results = [_run_chunk(c, solution, params, sim, canon) for c in chunks]
    else:
        results = Parallel(n_jobs=sim.n_jobs)(delayed(_run_chunk)(c, solution, params, sim, canon) for c in chunks)
    records = [r for chunk in results for r in chunk]
    liquidated = sum(r.liquidated for r in records)
    logger.info(f"✅ batch finished: {liquidated}/{len(records)} liquidated")
    return records
