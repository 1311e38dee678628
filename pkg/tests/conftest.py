import numpy as np
import pytest
import torch

from coldal.phantom import PhantomSpec, generate_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_cases():
    """Eight training and three validation phantoms at 32^3."""
    return generate_dataset(PhantomSpec(seed=7), 8, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_RESULTS = {}
ACCEPTANCE_CRITERIA = range(1, 11)


@pytest.fixture
def criterion():
    """Record one acceptance criterion outcome; returns ``ok`` for use in an assert."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_RESULTS[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    ran = any("test_acceptance" in str(r.nodeid) for key in ("passed", "failed", "error")
              for r in terminalreporter.stats.get(key, []))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in ACCEPTANCE_CRITERIA:
        terminalreporter.write_line(ACCEPTANCE_RESULTS.get(n, f"criterion {n:>2}: FAIL  (did not complete)"))
