import numpy as np
import pytest

_CRITERIA = []


def pytest_runtest_logreport(report):
    """Collect one line per acceptance criterion (detail comes from ``record_property``)."""
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        props = dict(report.user_properties)
        label = props.get("criterion", report.nodeid.split("::")[-1])
        status = "PASS" if report.outcome == "passed" else "FAIL"
        _CRITERIA.append(f"criterion {label}: {status}  {props.get('detail', '')}".rstrip())


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)

from eitfactor.fem import ConductivityField
from eitfactor.fixtures import HEAD_SIGMA, cylinder_mesh, head_mesh
from eitfactor.mesh import Mesh, build_layout


@pytest.fixture(scope="session")
def one_tet():
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    tets = np.array([[0, 1, 2, 3]])
    facets = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return Mesh.from_arrays(verts, tets, [1], facets, [101, 102, 103, 104])


@pytest.fixture(scope="session")
def small_cyl():
    """Coarse single-ring cylinder with 8 electrodes."""
    return cylinder_mesh([(8, 3.5)], 4, 1.0, h_max=2.5)


@pytest.fixture(scope="session")
def small_cyl_layout(small_cyl):
    return build_layout(small_cyl, range(101, 109))


@pytest.fixture(scope="session")
def fine_cyl():
    """Finer copy of the same geometry (a different discretisation)."""
    return cylinder_mesh([(8, 3.5)], 6, 0.5, h_max=1.5)


@pytest.fixture(scope="session")
def small_head():
    return head_mesh(10)


@pytest.fixture(scope="session")
def small_head_layout(small_head):
    return build_layout(small_head, range(101, 132))


@pytest.fixture(scope="session")
def layered():
    return ConductivityField(HEAD_SIGMA)


@pytest.fixture(scope="session")
def unit_sigma():
    return ConductivityField({1: 1.0, 2: 1.0, 3: 1.0})


@pytest.fixture(scope="session")
def suite(tmp_path_factory):
    """Fixture meshes and experiment configs written once per session."""
    from eitfactor.fixtures import write_suite

    return write_suite(tmp_path_factory.mktemp("suite"))


@pytest.fixture(scope="session")
def projection_cache(tmp_path_factory):
    return tmp_path_factory.mktemp("projections")


@pytest.fixture(scope="session")
def simulated(suite):
    """Memoised difference data per (config name, overrides)."""
    from eitfactor.config import ExperimentConfig
    from eitfactor.pipeline import run_simulate

    store = {}

    def get(name, **overrides):
        key = (name, tuple(sorted(overrides.items())))
        if key not in store:
            cfg = ExperimentConfig.load(suite[name]).with_overrides(**overrides)
            store[key] = (cfg, run_simulate(cfg).diff)
        return store[key]

    return get
