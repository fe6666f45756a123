import itertools

import numpy as np
import pytest


def brute_force_min_image(a, b, L):
    """Displacement a - b over all 27 neighbouring images, shortest wins."""
    d = np.asarray(a, float) - np.asarray(b, float)
    best = None
    for shift in itertools.product((-1, 0, 1), repeat=3):
        cand = d + L * np.array(shift)
        if best is None or np.linalg.norm(cand) < np.linalg.norm(best):
            best = cand
    return best


def central_fd(f, x, h):
    x = np.asarray(x, float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS = []


@pytest.fixture
def verdict():
    """Record and assert one acceptance criterion; the PASS/FAIL line is also
    printed in the terminal summary."""

    def record(label, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {label}  {detail}".rstrip()
        _VERDICTS.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
