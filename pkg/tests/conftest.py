import hypothesis
import numpy as np
import pytest

from spectromix.materials import EnergyGrid, data_dir, ingest_attenuation_table, load_material_set
from spectromix.phantom import XCAT_MATERIALS
from spectromix.spectra import generate_library

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture(scope="session")
def grid():
    return EnergyGrid.uniform(10, 120, 1)


@pytest.fixture(scope="session")
def mset(grid):
    return load_material_set(XCAT_MATERIALS, grid)


@pytest.fixture(scope="session")
def aluminum(grid):
    return ingest_attenuation_table(data_dir() / "aluminum.csv", grid)


@pytest.fixture(scope="session")
def library(grid, aluminum):
    return generate_library(120.0, range(10), grid, aluminum)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance.VERDICTS:
        terminalreporter.write_line(line)
