"""INI run configuration parsed into validated pydantic blocks."""
from __future__ import annotations

import configparser
import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from services.errors import MinPriceError
from services.model_service import (
    REFERENCE_ELL,
    REFERENCE_ETA,
    REFERENCE_K,
    REFERENCE_Q0,
    REFERENCE_S0,
    REFERENCE_SIGMA,
    REFERENCE_VOLUME,
    ModelParams,
    RegimeKind,
    RegimeSpec,
    SVParams,
    canonical_K,
)
from services.path_sim_service import LIQUIDATION_EPS, SimSettings
from services.pde_1d_service import DEFAULT_SCHEDULE, GridSpec1D
from services.pde_sv_service import GridSpec2D

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

SECTIONS = ("model", "sv", "regime", "solver", "sim", "output")


class ConfigError(MinPriceError, ValueError):
    pass


def _split_list(value: Union[str, Sequence, None]) -> List[str]:
    if value is None:
        return []
    if isinstance(value, str):
        return [v.strip() for v in value.replace(";", ",").split(",") if v.strip()]
    return list(value)


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelBlock(_Block):
    p_hat: float = Field(2.0, gt=1.0, description="execution-cost exponent")
    k: float = Field(REFERENCE_K, ge=0.0, description="permanent impact, price per share per share")
    eta: float = Field(REFERENCE_ETA, gt=0.0, description="temporary cost coefficient")
    V: float = Field(REFERENCE_VOLUME, gt=0.0, description="market volume, shares per unit time")
    sigma: float = Field(REFERENCE_SIGMA, gt=0.0, description="price volatility, price per sqrt(time)")
    S0: float = Field(REFERENCE_S0, gt=0.0, description="decision price")
    T: float = Field(1.0, gt=0.0, description="horizon")
    q0: float = Field(REFERENCE_Q0, gt=0.0, description="initial position, shares")

    def to_params(self) -> ModelParams:
        return ModelParams(**self.model_dump())


class SVBlock(_Block):
    enabled: bool = False
    alpha: float = Field(1.0, gt=0.0, description="variance mean reversion")
    theta: float = Field(1.0, gt=0.0, description="long-run variance, sigma units")
    c: float = Field(0.2, gt=0.0, description="vol of variance")
    rho: float = Field(0.0, ge=-1.0, le=1.0)
    nu0: float = Field(1.0, gt=0.0, description="initial variance, sigma units")

    def to_params(self) -> Optional[SVParams]:
        if not self.enabled:
            return None
        return SVParams(alpha=self.alpha, theta=self.theta, c=self.c, rho=self.rho, nu0=self.nu0)


class RegimeBlock(_Block):
    kind: str = "R1"
    ell: float = Field(REFERENCE_ELL, description="threshold, sigma units below S0")
    delta: float = Field(0.0, ge=0.0, description="end buffer, time units")
    b: float = Field(0.0, ge=0.0, description="re-entry buffer, sigma units")
    n_switches: Optional[int] = Field(None, description="trading-interval budget; empty or inf for unbounded")
    reentry: Literal["optional", "forced"] = Field("optional", description="whether a paused trader must resume at ell + b")

    @field_validator("kind")
    @classmethod
    def _kind(cls, value: str) -> str:
        return RegimeKind.parse(value).value

    @field_validator("n_switches", mode="before")
    @classmethod
    def _switches(cls, value):
        if value is None or (isinstance(value, str) and value.strip().lower() in ("", "inf", "none")):
            return None
        return value

    def to_spec(self) -> RegimeSpec:
        return RegimeSpec(kind=RegimeKind.parse(self.kind), ell=self.ell, delta=self.delta, b=self.b,
                          n_switches=self.n_switches, reentry=self.reentry)


class SolverBlock(_Block):
    nx: int = Field(400, ge=50)
    nt: int = Field(400, ge=1)
    width_sd: float = Field(6.0, gt=0.0, description="half-width of the price axis in sqrt(T) units")
    t_cut: float = Field(0.05, gt=0.0)
    trunc_schedule: Tuple[float, ...] = DEFAULT_SCHEDULE
    tol: float = Field(1e-3, gt=0.0)
    substep_ratio: float = Field(0.25, gt=0.0, le=1.0)
    explicit_reaction: bool = False
    mollify_m: Optional[float] = Field(None, gt=0.0)
    smooth_eps: Optional[float] = Field(None, gt=0.0)
    max_switches: int = Field(50, ge=1)
    scheme: Literal["split", "explicit"] = "split"
    ns: int = Field(96, ge=50)
    n_nu: int = Field(96, ge=3)
    cfl: float = Field(0.45, gt=0.0, le=1.0)

    @field_validator("trunc_schedule", mode="before")
    @classmethod
    def _schedule(cls, value):
        levels = tuple(float(v) for v in _split_list(value))
        if not levels or any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError(f"trunc_schedule must be strictly increasing, got {levels}")
        return levels

    @field_validator("mollify_m", "smooth_eps", mode="before")
    @classmethod
    def _optional(cls, value):
        if isinstance(value, str) and value.strip().lower() in ("", "none"):
            return None
        return value


class SimBlock(_Block):
    seed: int = 20240501
    n_paths: int = Field(10_000, ge=1)
    n_steps: int = Field(2000, ge=100)
    antithetic: bool = False
    bridge_correction: bool = False
    dump_path_indices: Tuple[int, ...] = ()
    liquidation_eps: float = Field(LIQUIDATION_EPS, gt=0.0)
    chunk_size: int = Field(500, ge=1)

    @field_validator("dump_path_indices", mode="before")
    @classmethod
    def _indices(cls, value):
        return tuple(int(v) for v in _split_list(value))

    def to_settings(self, n_jobs: int = 1) -> SimSettings:
        return SimSettings(n_jobs=n_jobs, **self.model_dump())


class OutputBlock(_Block):
    directory: Path = Path("output")
    formats: Tuple[Literal["csv", "npz"], ...] = ("csv",)

    @field_validator("formats", mode="before")
    @classmethod
    def _formats(cls, value):
        return tuple(v.lower() for v in _split_list(value))


class RunConfig(_Block):
    model: ModelBlock = ModelBlock()
    sv: SVBlock = SVBlock()
    regime: RegimeBlock = RegimeBlock()
    solver: SolverBlock = SolverBlock()
    sim: SimBlock = SimBlock()
    output: OutputBlock = OutputBlock()

    def params(self) -> ModelParams:
        return self.model.to_params()

    def sv_params(self) -> Optional[SVParams]:
        return self.sv.to_params()

    def regime_spec(self) -> RegimeSpec:
        return self.regime.to_spec()

    def grid_spec_1d(self) -> GridSpec1D:
        s = self.solver
        return GridSpec1D.centered(T=self.model.T, width_sd=s.width_sd, nx=s.nx, nt=s.nt, t_cut=s.t_cut,
                                   substep_ratio=s.substep_ratio, explicit_reaction=s.explicit_reaction)

    def grid_spec_2d(self) -> GridSpec2D:
        s = self.solver
        half = s.width_sd * math.sqrt(self.model.T)
        return GridSpec2D(s_min=-half, s_max=half, ns=s.ns, n_nu=s.n_nu, nt=s.nt, T=self.model.T, t_cut=s.t_cut,
                          substep_ratio=s.substep_ratio, scheme=s.scheme, cfl=s.cfl)

    def sim_settings(self, n_jobs: int = 1) -> SimSettings:
        return self.sim.to_settings(n_jobs)

    def config_hash(self) -> str:
        return _digest(self.model_dump(mode="json"))

    def solve_hash(self) -> str:
        """Digest of everything the value grids depend on.

        In the quadratic case only the canonical quantities enter, so
        configurations differing by a price-scale change share grids.
        """
        params = self.params()
        payload: Dict[str, object] = {
            "regime": self.regime.model_dump(mode="json"),
            "solver": self.solver.model_dump(mode="json"),
            "sv": self.sv.model_dump(mode="json"),
            "T": params.T,
        }
        if params.p_hat == 2.0:
            payload["K_c"] = repr(canonical_K(params))
        else:
            payload["model"] = self.model.model_dump(mode="json")
        return _digest(payload)

    def with_output(self, directory: Path) -> "RunConfig":
        return self.model_copy(update={"output": self.output.model_copy(update={"directory": Path(directory)})})


def _digest(payload: Dict[str, object]) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def parse_overrides(items: Sequence[str]) -> Dict[str, Dict[str, str]]:
    """'section.key=value' strings grouped by section."""
    out: Dict[str, Dict[str, str]] = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r} in override {item!r}")
        out.setdefault(section, {})[name.strip()] = value.strip()
    return out


def config_from_mapping(sections: Dict[str, Dict[str, object]]) -> RunConfig:
    unknown = set(sections) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        return RunConfig(**{name: values for name, values in sections.items() if values is not None})
    except ValidationError as exc:
        raise ConfigError(f"invalid run configuration: {exc}") from exc


def load_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Read an INI file (or defaults when path is None) and apply overrides."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    sections: Dict[str, Dict[str, object]] = {s: dict(parser.items(s)) for s in parser.sections()}
    for section, values in parse_overrides(overrides).items():
        sections.setdefault(section, {}).update(values)
    if sections.get("sv") and "enabled" not in sections["sv"]:
        sections["sv"]["enabled"] = "true"
    config = config_from_mapping(sections)
    logger.info(f"🔧 loaded config {path or '<defaults>'} (hash {config.config_hash()[:12]})")
    return config
