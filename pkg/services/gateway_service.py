import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd
from joblib import Parallel, delayed

from backend import storage
from backend.config_loader import RunConfig
from services.errors import DomainError, GridMismatch
from services.model_service import RegimeKind, ValidationReport, canonical_K, to_canonical, validate
from services.path_sim_service import PathRecord, ValueSolution, run_batch
from services.pde_1d_service import (
    Grid1D,
    TerminalSpec,
    solve_regime2,
    solve_regime3,
    solve_regime4,
    solve_singular,
)
from services.pde_sv_service import Grid2D, solve_sv
from services.stats_service import RunSummary, compare_baseline, qq_table, records_frame, summarize

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

SWEEP_AXES = ("ell", "kV_over_eta")
MANIFEST = "manifest.json"
RECORDS = "records.csv"


@dataclass
class CheckResult:
    report: ValidationReport
    K_c: Optional[float]

    @property
    def exit_code(self) -> int:
        return 0 if self.report.passed else 2

    def lines(self) -> List[str]:
        out = self.report.lines()
        if self.K_c is not None:
            out.append(f"K_c = kV/(2 eta) = {self.K_c:.6g}")
        return out


@dataclass
class SolveResult:
    manifest: Dict[str, Any]
    grids: Dict[str, Union[Grid1D, Grid2D]]
    paths: Dict[str, Path] = field(default_factory=dict)


class GatewayService:
    """Runs the check / solve / simulate / analyze / sweep pipeline over a RunConfig."""

    def __init__(self, n_jobs: int = 1, registry_url: Optional[str] = None):
        self._n_jobs = int(n_jobs)
        self._registry_url = registry_url
        if registry_url:
            try:
                storage.init_db(registry_url)
            except Exception as e:
                logger.warning(f"⚠️ run registry disabled: {e}")
                self._registry_url = None

    def _register(self, command: str, config: RunConfig, out_dir: Path, response: Dict[str, Any]) -> None:
        if not self._registry_url:
            return
        try:
            storage.save_run(self._registry_url, command, config.config_hash(), str(out_dir),
                             config.model_dump(mode="json"), response)
        except Exception as e:
            logger.warning(f"⚠️ could not record {command} run: {e}")

    # ------------------------------------------------------------------ check

    def cmd_check(self, config: RunConfig) -> CheckResult:
        params = config.params()
        report = validate(params, config.sv_params(), config.regime_spec(), strict=False)
        k_c = canonical_K(params) if params.p_hat == 2.0 else None
        for line in report.lines():
            logger.info(line)
        return CheckResult(report=report, K_c=k_c)

    # ------------------------------------------------------------------ solve

    def _solve_grids(self, config: RunConfig) -> Tuple[Dict[str, Union[Grid1D, Grid2D]], Dict[str, Any]]:
        params = config.params()
        regime = config.regime_spec()
        sv = config.sv_params()
        solver = config.solver
        validate(params, sv, regime, strict=True)
        kind = regime.kind
        if params.p_hat == 2.0:
            K_level, p, vol = to_canonical(params, regime).K_c, 2.0, 1.0
        else:
            if kind not in (RegimeKind.R0_FULL_LIQUIDATION, RegimeKind.R1_TERMINAL_THRESHOLD):
                raise DomainError(f"p_hat={params.p_hat} solves support R0 and R1 only")
            K_level, p, vol = params.K, params.p, params.vol_bar
        spec = config.grid_spec_1d()
        common = dict(tol=solver.tol, schedule=solver.trunc_schedule)
        extra: Dict[str, Any] = {}

        if kind is RegimeKind.R0_FULL_LIQUIDATION:
            terminal = TerminalSpec.all_singular()
        else:
            terminal = TerminalSpec.threshold(K_level, regime.ell, solver.mollify_m)

        if sv is not None:
            if kind not in (RegimeKind.R0_FULL_LIQUIDATION, RegimeKind.R1_TERMINAL_THRESHOLD):
                raise DomainError("stochastic-volatility solves support R0 and R1 only")
            return {"u_sv": solve_sv(config.grid_spec_2d(), sv, terminal, p, vol, **common)}, extra

        if kind in (RegimeKind.R0_FULL_LIQUIDATION, RegimeKind.R1_TERMINAL_THRESHOLD):
            return {"u": solve_singular(spec, terminal, p, vol, **common)}, extra
        if kind is RegimeKind.R2_STOP_AT_HIT:
            return {"u": solve_regime2(spec, K_level, regime.ell, p, vol, **common)}, extra
        if kind is RegimeKind.R3_PAUSE_BELOW:
            u_inf, v = solve_regime3(spec, K_level, regime.ell, regime.delta, p, vol,
                                     smooth_eps=solver.smooth_eps, **common)
            return {"u_inf": u_inf, "v": v}, extra
        state = solve_regime4(spec, K_level, regime.ell, regime.delta, regime.b, regime.n_switches, p, vol,
                              max_switches=solver.max_switches, reentry=regime.reentry, **common)
        grids: Dict[str, Union[Grid1D, Grid2D]] = {}
        for i, g in enumerate(state.u1, start=1):
            grids[f"u1_{i}"] = g
        for i, g in enumerate(state.u0, start=1):
            grids[f"u0_{i}"] = g
        extra["recursion"] = {"levels": state.n, "increments": state.increments, "direction": state.direction,
                             "reentry": state.reentry}
        return grids, extra

    def cmd_solve(self, config: RunConfig, out_dir: Optional[Path] = None) -> SolveResult:
        out_dir = Path(out_dir or config.output.directory)
        logger.info(f"🔧 solving {config.regime.kind} into {out_dir}")
        grids, extra = self._solve_grids(config)
        paths: Dict[str, Path] = {}
        files: Dict[str, Dict[str, str]] = {}
        for name, grid in grids.items():
            for fmt in config.output.formats:
                path = storage.write_grid(grid, out_dir / "grids" / name, fmt)
                paths[f"{name}.{fmt}"] = path
                files.setdefault(name, {})[fmt] = str(path.relative_to(out_dir))
        manifest = {
            "config_hash": config.config_hash(),
            "solve_hash": config.solve_hash(),
            "regime": config.regime.model_dump(mode="json"),
            "grids": files,
            "certificates": {n: g.certificate.as_dict() for n, g in grids.items() if g.certificate is not None},
            **extra,
        }
        paths["manifest"] = storage.write_json(manifest, out_dir / MANIFEST)
        self._register("solve", config, out_dir, {"manifest": manifest})
        logger.info(f"✅ solve finished: {len(grids)} grids")
        return SolveResult(manifest=manifest, grids=grids, paths=paths)

    # ------------------------------------------------------------------ simulate

    @staticmethod
    def load_solution(config: RunConfig, grid_dir: Path) -> ValueSolution:
        """Value grids of a previous solve, checked against the configuration."""
        grid_dir = Path(grid_dir)
        manifest = storage.read_json(grid_dir / MANIFEST)
        if manifest.get("solve_hash") != config.solve_hash():
            raise GridMismatch(f"grids in {grid_dir} were solved for a different configuration")
        grids = {}
        for name, files in manifest["grids"].items():
            rel = files.get("csv") or files.get("npz")
            grids[name] = storage.read_grid(grid_dir / rel)
        return solution_from_grids(config, grids)

    def simulate(self, config: RunConfig, solution: ValueSolution) -> List[PathRecord]:
        return run_batch(solution, config.params(), config.sim_settings(self._n_jobs))

    def cmd_simulate(self, config: RunConfig, grid_dir: Optional[Path] = None, out_dir: Optional[Path] = None) -> Path:
        out_dir = Path(out_dir or config.output.directory)
        solution = self.load_solution(config, Path(grid_dir or out_dir))
        records = self.simulate(config, solution)
        path = storage.write_records(records, out_dir / RECORDS)
        storage.write_trajectories(records, config.model.sigma, out_dir / "trajectories")
        self._register("simulate", config, out_dir, {"records": str(path), "n_paths": len(records)})
        return path

    # ------------------------------------------------------------------ analyze

    def cmd_analyze(
        self,
        records: Union[Path, Sequence[PathRecord], pd.DataFrame],
        out_dir: Path,
        baseline: Optional[Union[Path, Sequence[PathRecord], pd.DataFrame]] = None,
    ) -> RunSummary:
        out_dir = Path(out_dir)
        frame = storage.read_records(records) if isinstance(records, (str, Path)) else records
        summary = summarize(frame)
        storage.write_summary(summary, out_dir)
        frame = records_frame(frame)
        storage.write_table(qq_table(frame["A2"].to_numpy(dtype=float)), out_dir / "tables" / "qq_A2.csv")
        if baseline is not None:
            base = storage.read_records(baseline) if isinstance(baseline, (str, Path)) else baseline
            storage.write_table(compare_baseline(frame, base), out_dir / "tables" / "baseline_comparison.csv", index=True)
        return summary

    # ------------------------------------------------------------------ sweep

    def run_point(self, config: RunConfig, out_dir: Path) -> RunSummary:
        """solve, simulate and analyze one configuration under out_dir."""
        solved = self.cmd_solve(config, out_dir)
        records = self.simulate(config, solution_from_grids(config, solved.grids))
        storage.write_records(records, Path(out_dir) / RECORDS)
        return self.cmd_analyze(records, out_dir)

    def cmd_sweep(self, config: RunConfig, axis: str, values: Sequence[float], out_dir: Optional[Path] = None) -> pd.DataFrame:
        if axis not in SWEEP_AXES:
            raise DomainError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
        if not values:
            raise DomainError("sweep needs at least one value")
        out_dir = Path(out_dir or config.output.directory)
        points = [(float(v), sweep_point(config, axis, float(v))) for v in values]
        logger.info(f"🔧 sweep over {axis}: {[v for v, _ in points]}")
        inner = GatewayService(n_jobs=1)
        if self._n_jobs == 1:
            summaries = [inner.run_point(cfg, out_dir / f"{axis}={v:g}") for v, cfg in points]
        else:
            summaries = Parallel(n_jobs=self._n_jobs)(
                delayed(inner.run_point)(cfg, out_dir / f"{axis}={v:g}") for v, cfg in points
            )

        rows = []
        cdf_frames: Dict[str, List[pd.DataFrame]] = {}
        for (value, _), s in zip(points, summaries):
            rows.append({
                axis: value,
                "n_paths": s.n_paths,
                "p_liquidated": s.p_liquidated,
                "p_liquidated_se": s.p_liquidated_se,
                "mean_fq_pos": s.mean_fq_pos,
                "sd_fq_pos": s.sd_fq_pos,
                "mean_A": s.means["A"],
                "mean_A2": s.means["A2"],
                "mean_A3": s.means["A3"],
                "tail_slope": s.exp_tail.slope if s.exp_tail else math.nan,
                "tail_r2": s.exp_tail.r2 if s.exp_tail else math.nan,
            })
            for name in ("A2", "A3", "fqT"):
                arr = s.cdf_tables[name]
                cdf_frames.setdefault(name, []).append(pd.DataFrame({axis: value, "x": arr[0], "F": arr[1]}))
        table = pd.DataFrame(rows)
        storage.write_table(table, out_dir / "sweep.csv")
        for name, frames in cdf_frames.items():
            storage.write_table(pd.concat(frames, ignore_index=True), out_dir / f"sweep_cdf_{name}.csv")
        self._register("sweep", config, out_dir, {"axis": axis, "values": list(values)})
        logger.info(f"✅ sweep finished: {len(rows)} points")
        return table


def sweep_point(config: RunConfig, axis: str, value: float) -> RunConfig:
    """Configuration with one sweep coordinate replaced; kV/eta moves k at fixed V and eta."""
    if axis == "ell":
        return config.model_copy(update={"regime": config.regime.model_copy(update={"ell": value})})
    if axis == "kV_over_eta":
        k = value * config.model.eta / config.model.V
        return config.model_copy(update={"model": config.model.model_copy(update={"k": k})})
    raise DomainError(f"unknown sweep axis {axis!r}")


def solution_from_grids(config: RunConfig, grids: Dict[str, Union[Grid1D, Grid2D]]) -> ValueSolution:
    regime = config.regime_spec()
    T = config.model.T
    if any(isinstance(g, Grid2D) for g in grids.values()):
        raise DomainError("path simulation runs on one-dimensional value grids")
    kind = regime.kind
    if kind is RegimeKind.R3_PAUSE_BELOW:
        if "v" not in grids or "u_inf" not in grids:
            raise GridMismatch("pause-below simulation needs grids v and u_inf")
        return ValueSolution(regime=regime, primary=grids["v"], u_inf=grids["u_inf"], T=T)
    if kind is RegimeKind.R4_PAUSE_WITH_BUFFER:
        ladder = [grids[f"u1_{i}"] for i in range(1, len(grids) + 1) if f"u1_{i}" in grids]
        if not ladder:
            raise GridMismatch("pause-with-buffer simulation needs the u1 grids")
        return ValueSolution(regime=regime, ladder=tuple(ladder), T=T, hold_value=-canonical_K(config.params()))
    if "u" not in grids:
        raise GridMismatch(f"{kind.value} simulation needs grid u")
    return ValueSolution(regime=regime, primary=grids["u"], T=T)
