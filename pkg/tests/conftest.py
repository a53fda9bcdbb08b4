import os
import time

import numpy as np
import pytest

from kneeaug.imagecore import GrayImage

_acceptance_lines = []


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_acceptance_lines):
        terminalreporter.write_line(line)


class Criterion:
    """Times one acceptance criterion and records a single PASS/FAIL line."""

    def __init__(self, number, title, limit_s=None):
        self.number, self.title, self.limit_s = number, title, limit_s
        self.detail = ""

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        ok = exc_type is None
        if ok and self.limit_s is not None and elapsed >= self.limit_s:
            ok = False
            self.detail += f" exceeded {self.limit_s:g}s"
        status = "PASS" if ok else "FAIL"
        line = f"criterion {self.number}: {status}  {self.title} ({elapsed:.1f}s){self.detail}"
        _acceptance_lines.append(line)
        print(line)
        if exc_type is None and not ok:
            pytest.fail(line)
        return False


@pytest.fixture
def criterion():
    return Criterion


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_image(rng, h=None, w=None, low=0, high=256):
    h = h if h is not None else int(rng.integers(1, 40))
    w = w if w is not None else int(rng.integers(1, 40))
    return GrayImage(rng.integers(low, high, size=(h, w)).astype(np.uint8))


@pytest.fixture
def tmp_cwd(tmp_path):
    old = os.getcwd()
    os.chdir(tmp_path)
    yield tmp_path
    os.chdir(old)
