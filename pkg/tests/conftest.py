import numpy as np
import pytest

from conicarleman.geometry import build_cone, build_cylinder
from conicarleman.operators import assemble_laplacian


@pytest.fixture(scope="session")
def cone():
    return build_cone(0.8, 1.0, 4.0, 41, 32, 0.5)


@pytest.fixture(scope="session")
def cone_L(cone):
    return assemble_laplacian(cone)


@pytest.fixture(scope="session")
def flat():
    """beta = 1 cone: the pure-cone region r >= r_cone is the Euclidean plane."""
    return build_cone(1.0, 1.0, 4.0, 81, 128, 0.5)


@pytest.fixture(scope="session")
def cylinder():
    return build_cylinder(1.0, 10.0, 200, 128)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report(request):
    """Record one ``PASS``/``FAIL`` line per acceptance criterion."""
    def emit(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
