import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_LINES = pytest.StashKey[dict]()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class Criterion:
    """Times one acceptance criterion and records a PASS/FAIL line for the summary."""

    def __init__(self, lines: dict, number: int, title: str, limit: float):
        self.lines, self.number, self.title, self.limit = lines, number, title, limit
        self.checks: list[tuple[bool, str]] = []

    def check(self, ok, detail: str) -> None:
        self.checks.append((bool(ok), detail))

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        secs = time.perf_counter() - self.t0
        details = [d if ok else f"NOT MET: {d}" for ok, d in self.checks]
        if exc_type is not None:
            details.append(f"raised {exc_type.__name__}: {exc}")
        if secs >= self.limit:
            details.append(f"over the {self.limit:.0f}s budget")
        ok = exc_type is None and secs < self.limit and all(ok for ok, _ in self.checks)
        line = (f"{'PASS' if ok else 'FAIL'}  [{self.number:2d}] {self.title}: "
                f"{'; '.join(details)} ({secs:.1f}s)")
        self.lines[self.number] = line
        print(line)
        if exc_type is None:
            assert ok, line
        return False


@pytest.fixture
def criterion(request):
    lines = request.config.stash.setdefault(_LINES, {})

    def make(number: int, title: str, limit: float) -> Criterion:
        return Criterion(lines, number, title, limit)
    return make


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
