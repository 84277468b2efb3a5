import numpy as np
import pytest

from lagfield import Grid2D, StencilKind
from lagfield.density import WAVE_MLP, mlp_density
from lagfield.reference import WaveParams, generate_trajectories
from lagfield.training import AdamConfig, Dataset, LossConfig, train

WAVE_GRID = Grid2D(20, 20, 0.025, 0.05)

# one line per acceptance criterion, printed at the end of the run
RESULTS = {}


@pytest.fixture
def record():
    def _record(criterion, ok, detail):
        line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        RESULTS[criterion] = line
        print(line)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[key])


def _trained(K, epochs):
    fields = generate_trajectories(WaveParams(), K, WAVE_GRID, seed=1)
    ds = Dataset.from_fields(fields, StencilKind.PTS3_7STENCIL)
    run = train(mlp_density(WAVE_MLP, 3, 1, seed=0), ds, LossConfig(), AdamConfig(epochs=epochs), seed=0)
    return fields, run


@pytest.fixture(scope="session")
def desk_wave_small():
    """K = 10 trajectories, 500 epochs."""
    return _trained(10, 500)


@pytest.fixture(scope="session")
def desk_wave_large():
    """K = 80 trajectories, 750 epochs."""
    return _trained(80, 750)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
