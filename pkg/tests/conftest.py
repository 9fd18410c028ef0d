import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from deformstream.mesh_core import TriangleMesh, cylinder_mesh, grid_mesh, uv_sphere

settings.register_profile("repo", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

ACCEPTANCE = pytest.StashKey[dict]()
CRITERIA = range(1, 10)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def grid():
    return grid_mesh(6, 5)


@pytest.fixture
def tube():
    return cylinder_mesh(10, 16)


@pytest.fixture
def sphere():
    return uv_sphere(12, 16)


@pytest.fixture
def record(request):
    """``record(n, ok, detail)`` stores one acceptance verdict for the summary."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    def _record(n: int, ok: bool, detail: str) -> None:
        results[n] = (bool(ok), detail)

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in CRITERIA:
        ok, detail = results.get(n, (False, "not run to completion"))
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def points_mesh(points) -> TriangleMesh:
    """Face-less mesh holding just ``points``."""
    return TriangleMesh(np.asarray(points, dtype=float), np.zeros((0, 3), dtype=int))
