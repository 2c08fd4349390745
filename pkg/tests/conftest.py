import numpy as np
import pytest

from cdrlab.worldsim import Body, Shape, make_state


def disc(pos, vel=(0.0, 0.0), size=0.1, mass=1.0, shape=Shape.DISC):
    return Body(shape, size, tuple(pos), tuple(vel), mass)


def state_of(*bodies, drag=0.0, restitution=1.0, L=1.0):
    return make_state(list(bodies), L, drag, restitution)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion; echoed in the summary."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'} {title}" + (f" | {detail}" if detail else "")
        _ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
