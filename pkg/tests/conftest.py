import numpy as np
import pytest
from hypothesis import settings

from services.model_service import ModelParams, RegimeKind, RegimeSpec, to_canonical
from services.path_sim_service import ValueSolution
from services.pde_1d_service import GridSpec1D, TerminalSpec, solve_singular

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")


@pytest.fixture
def reference_params() -> ModelParams:
    return ModelParams()


@pytest.fixture
def reference_canon(reference_params):
    return to_canonical(reference_params, RegimeSpec())


@pytest.fixture
def small_spec() -> GridSpec1D:
    return GridSpec1D.centered(nx=120, nt=120)


@pytest.fixture(scope="session")
def r0_grid():
    return solve_singular(GridSpec1D.centered(nx=100, nt=200), TerminalSpec.all_singular())


@pytest.fixture(scope="session")
def r0_solution(r0_grid) -> ValueSolution:
    return ValueSolution(regime=RegimeSpec(kind=RegimeKind.R0_FULL_LIQUIDATION), primary=r0_grid, T=1.0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
