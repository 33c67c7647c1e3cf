import time

import numpy as np
import pytest

from stfmm.mesh import build_tensor_mesh, generate_cube_surface
from stfmm.tree import build_tree


@pytest.fixture(scope="session")
def std_mesh():
    """Cube surface with 192 triangles times 16 steps on (0, 0.25]: 3072 DOFs."""
    return build_tensor_mesh(generate_cube_surface(4), 0.25, 16)


@pytest.fixture(scope="session")
def std_tree(std_mesh):
    return build_tree(std_mesh, n_max=80, c_st=0.9, n_tr=5)


@pytest.fixture(scope="session")
def small_mesh():
    """48 triangles times 32 steps on (0, 1]: 1536 DOFs, cheap to assemble densely."""
    return build_tensor_mesh(generate_cube_surface(2), 1.0, 32)


@pytest.fixture(scope="session")
def small_tree(small_mesh):
    return build_tree(small_mesh, n_max=40)


@pytest.fixture(scope="session")
def small_table(small_mesh):
    from stfmm.assembly import TrianglePairTable

    return TrianglePairTable(small_mesh)


@pytest.fixture(scope="session")
def small_dense(small_mesh, small_table):
    from stfmm.assembly import assemble_dense

    return assemble_dense(small_mesh, table=small_table)


@pytest.fixture(scope="session")
def small_plan(small_tree, small_table):
    from stfmm.fmm import FMMPlan

    return FMMPlan(small_tree, table=small_table)


@pytest.fixture(scope="session")
def std_table(std_mesh):
    from stfmm.assembly import TrianglePairTable

    return TrianglePairTable(std_mesh)


# wall-clock build times of the session fixtures, for runtime criteria
BUILD_TIMES = {}


@pytest.fixture(scope="session")
def std_dense(std_mesh, std_table):
    from stfmm.assembly import assemble_dense

    t0 = time.perf_counter()
    out = assemble_dense(std_mesh, table=std_table)
    BUILD_TIMES["std_dense"] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="session")
def std_plan(std_tree, std_table):
    from stfmm.fmm import FMMPlan

    t0 = time.perf_counter()
    out = FMMPlan(std_tree, table=std_table)
    BUILD_TIMES["std_plan"] = time.perf_counter() - t0
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---- acceptance report --------------------------------------------------------
ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """``record(n, ok, detail)`` stores one criterion outcome for the final summary."""

    def record(n, ok, detail):
        ACCEPTANCE[n] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
