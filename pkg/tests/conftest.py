import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_masks(rng, h, w, p=0.4):
    return rng.random((h, w)) < p, rng.random((h, w)) < p


_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.fixture
def criterion(request, capsys):
    """``criterion(n, ok, detail)`` prints one PASS/FAIL line and remembers it for the summary."""
    results = request.config.stash[_ACCEPTANCE]

    def record(n, ok, detail):
        results[n] = (bool(ok), detail)
        with capsys.disabled():
            print(f"\nCRITERION {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"CRITERION {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
