import numpy as np
import pytest

from softarm.mesh import ArmParams, generate_arm


@pytest.fixture(scope="session")
def arm():
    return generate_arm(ArmParams())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def unit_tet_mesh():
    from softarm.mesh import TetMesh

    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    return TetMesh(v, np.array([[0, 1, 2, 3]]))


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}")
