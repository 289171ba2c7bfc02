import numpy as np
import pytest

from plaplace.mesh import build_disk_mesh, build_partition
from plaplace.measurement import trig_currents


@pytest.fixture(scope="session")
def mesh():
    return build_disk_mesh(128)


@pytest.fixture(scope="session")
def partition(mesh):
    return build_partition(mesh, target_cells=240)


@pytest.fixture(scope="session")
def currents(mesh):
    return trig_currents(mesh, 8)


@pytest.fixture(scope="session")
def smooth_kappa(partition):
    c = partition.centroids
    return 0.3 * np.sin(2 * c[:, 0]) * np.cos(3 * c[:, 1]) + 0.2 * c[:, 0]


# one line per acceptance criterion, printed at the end of the session
GATE = []


@pytest.fixture
def gate():
    def record(criterion, passed, detail):
        GATE.append((criterion, bool(passed), detail))
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not GATE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(GATE, key=lambda g: g[0]):
        terminalreporter.write_line(f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
