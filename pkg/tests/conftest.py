from pathlib import Path

import numpy as np
import pytest

from srjet.endpoint import assemble_differential
from srjet.system import load_scenario_file

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def scenario(name: str, N: int | None = None):
    s = load_scenario_file(SCENARIOS / f"{name}.yaml")
    return s if N is None else s.with_grid(N)


@pytest.fixture(scope="session")
def martinet():
    return scenario("martinet", 64)


@pytest.fixture(scope="session")
def martinet_basis(martinet):
    return assemble_differential(martinet)


@pytest.fixture(scope="session")
def heisenberg():
    return scenario("heisenberg", 64)


@pytest.fixture(scope="session")
def heisenberg_basis(heisenberg):
    return assemble_differential(heisenberg)


def adapted_route(frame, du):
    """(q1, q2) from RK4 on the adapted system q1' = du.Y1, q2' = 2 du.Y2(q1).

    Independent of the manifold-frame variations; used as the second route
    for the frame and Gram checks.
    """
    N = frame.N
    h = frame.traj.h
    n = frame.lam1.shape[1]
    q1 = np.zeros((N + 1, n))
    q2 = np.zeros((N + 1, n))
    for j in range(N):
        slots = [(frame.Y1(j), frame.Y2(j)), (frame.Y1(j, mid=True), frame.Y2(j, mid=True)),
                 (frame.Y1(j + 1), frame.Y2(j + 1))]
        d = du[j]

        def rhs(s, x1):
            Y1, Y2 = slots[s]
            return d @ Y1, 2.0 * np.einsum("i,iab,b->a", d, Y2, x1)

        x1 = q1[j]
        k1 = rhs(0, x1)
        k2 = rhs(1, x1 + 0.5 * h * k1[0])
        k3 = rhs(1, x1 + 0.5 * h * k2[0])
        k4 = rhs(2, x1 + h * k3[0])
        q1[j + 1] = x1 + (h / 6) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        q2[j + 1] = q2[j] + (h / 6) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    return q1, q2


# Acceptance criteria report: one line per criterion at the end of the run.
CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(CRITERIA):
        status, text = CRITERIA[num]
        terminalreporter.write_line(f"criterion {num:2d}: {status:5s} {text}")
