import numpy as np
import pytest

from tracemia.dataset import QuerySequence


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def seq(i, text=None, label=None, doc="doc"):
    return QuerySequence(f"s{i:03d}", text or f"sequence number {i} with some words", 8, doc, label)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the terminal summary prints them all."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        print(line)
        lines.append(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
