import numpy as np
import pytest
from hypothesis import settings

from rskdd.data import synth_pair_with_features

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_pair():
    """A 2048-point synthetic view pair with normal/curvature channels."""
    return synth_pair_with_features(7, 2048)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training or timing checks")


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_line():
    """Record one ``criterion: PASS|FAIL detail`` line for the end-of-run summary."""
    def record(number: int, title: str, ok: bool, detail: str):
        ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {title}: {detail}")
        print(ACCEPTANCE_LINES[-1])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion")[1].split()[0])):
            terminalreporter.write_line(line)
