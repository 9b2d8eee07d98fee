import numpy as np
import pytest

from coordbf.model import ChannelSet, Scenario


def single_link(h, p_max=4.0, n_sub=1):
    """One cell, one user, ``n_sub`` copies of channel ``h``."""
    h = np.asarray(h, dtype=complex)
    sc = Scenario(1, 1, n_sub, len(h), p_max, 1.0, np.zeros((1, n_sub), int))
    arr = np.broadcast_to(h, (1, 1, 1, n_sub, len(h))).copy()
    return sc, ChannelSet(arr)


def random_channels(rng, n_cells, n_sub, n_tx, n_users=1, scale=1.0):
    shape = (n_cells, n_users, n_cells, n_sub, n_tx)
    return ChannelSet(scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2))


def decouple(channels: ChannelSet) -> ChannelSet:
    """Zero every cross channel (user of cell c from BS m != c)."""
    h = np.array(channels.h)
    n = h.shape[0]
    for c in range(n):
        for m in range(n):
            if c != m:
                h[c, :, m] = 0
    return ChannelSet(h)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
