import numpy as np
import pytest

from digitlab.model import ModelConfig, ModelState


def divmod_digits(n: int, b: int) -> list[int]:
    """Base-b digits of n, least significant first, via repeated divmod."""
    if n == 0:
        return [0]
    out = []
    while n:
        n, r = divmod(n, b)
        out.append(r)
    return out


def oracle_digit(n: int, b: int, d: int) -> int:
    digs = divmod_digits(n, b)
    return digs[d] if d < len(digs) else 0


TINY = ModelConfig(n_layers=2, width=16, n_heads=2, ff_width=32)


@pytest.fixture(scope="session")
def tiny_state():
    return ModelState.initial(TINY, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
