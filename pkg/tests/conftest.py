import numpy as np
import pytest

from mixsem import simstudy
from mixsem.data import Dataset
from mixsem.fitting import FitOptions
from mixsem.latent import LatentInitOptions, fit_latent
from mixsem.outcome import InitOptions, fit
from mixsem.simulate import SimulationTruth, simulate

_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL/SKIP line per acceptance criterion; returns ``passed``."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(number: int, name: str, passed, detail: str):
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        line = f"criterion {number:>2} [{status}] {name}: {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def truth():
    return SimulationTruth()


@pytest.fixture(scope="session")
def sim_data(truth):
    ds, eta = simulate(truth, 400, seed=21)
    return ds


@pytest.fixture(scope="session")
def outcome_fit(sim_data, truth):
    spec = simstudy.outcome_spec(truth.H, sim_data.p)
    state, report = fit(spec, sim_data, FitOptions(max_iter=2000, init=InitOptions(strategy="regression")))
    return spec, state, report


@pytest.fixture(scope="session")
def latent_fit(sim_data):
    spec = simstudy.latent_spec(2, sim_data.p)
    state, report = fit_latent(spec, sim_data, FitOptions(max_iter=2000, init=LatentInitOptions()))
    return spec, state, report


@pytest.fixture
def tiny_data():
    y = np.array([[1.0, 2.0], [np.nan, 0.5], [3.0, np.nan], [0.2, 1.1], [2.5, 2.2]])
    x = np.array([[0.1], [1.0], [-0.5], [0.3], [2.0]])
    return Dataset(y=y, observed=~np.isnan(y), x=x, outcome_names=("a", "b"), covariate_names=("c",))
