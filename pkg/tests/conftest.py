import numpy as np
import pytest

from pillarflow.grid import GridSpec
from pillarflow.lidar import PointCloud


@pytest.fixture
def desk_grid():
    return GridSpec(-8.0, 8.0, -8.0, 8.0, 0.25)


def cloud_from(xyz, r=None, t=0.0):
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    r = np.full(len(xyz), 0.5) if r is None else np.asarray(r, dtype=np.float64)
    return PointCloud(np.column_stack([xyz, r]), t)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one (criterion, ok, detail) line for the end-of-run summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(n, ok, detail):
        lines.append((n, bool(ok), detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(lines, key=lambda l: l[0]):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
