import numpy as np
import pytest
import torch

from medk2n.types import default_schema


@pytest.fixture
def schema():
    return default_schema()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
    yield


CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion."""
    def record(number, ok, detail):
        CRITERIA[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
