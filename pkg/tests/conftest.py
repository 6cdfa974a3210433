import numpy as np
import pytest
from hypothesis import settings, strategies as st

from nmpqueue.measure import StateMeasure

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

# lines collected by the acceptance suite, printed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@st.composite
def supports(draw, max_atom=12, max_size=4):
    rest = draw(st.lists(st.integers(2, max_atom), max_size=max_size - 1, unique=True))
    return [1] + sorted(rest)


@st.composite
def states(draw, tau_max=3, n_max=4, max_atoms=4):
    cells = draw(st.lists(st.tuples(st.integers(1, n_max), st.integers(0, tau_max)),
                          min_size=1, max_size=max_atoms, unique=True))
    w = np.array(draw(st.lists(st.floats(0.05, 1.0), min_size=len(cells) + 1, max_size=len(cells) + 1)))
    w /= w.sum()
    return StateMeasure.from_atoms({c: float(x) for c, x in zip(cells, w[1:])}, idle_mass=float(w[0]))


def random_state(rng: np.random.Generator, tau_max: int, n_max: int = 4, atoms: int = 4) -> StateMeasure:
    cells = {(int(rng.integers(1, n_max + 1)), int(rng.integers(0, tau_max + 1))) for _ in range(atoms)}
    w = rng.random(len(cells) + 1) + 0.05
    w /= w.sum()
    return StateMeasure.from_atoms({c: float(x) for c, x in zip(sorted(cells), w[1:])}, idle_mass=float(w[0]))


def random_support(rng: np.random.Generator, max_atom: int = 12, size: int = 3) -> list[int]:
    k = int(rng.integers(0, size))
    rest = rng.choice(np.arange(2, max_atom + 1), size=k, replace=False) if k else []
    return [1] + sorted(int(a) for a in rest)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
