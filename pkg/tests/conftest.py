import numpy as np
import pytest

from movfnet import _backend

# criterion number -> (passed, detail); filled by test_acceptance, printed at the end
ACCEPTANCE = {}


@pytest.fixture(params=_backend.available())
def backend(request):
    """Run the test once per kernel backend (compiled and pure Python)."""
    before = _backend.current()
    _backend.set_backend(request.param)
    yield request.param
    _backend.set_backend(before)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[k]
        tr.write_line(f"criterion {k}: {status}  {detail}")
