import importlib
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from agrimon import _purepy  # noqa: E402

_BACKENDS = [pytest.param(_purepy, id="python")]
try:
    _BACKENDS.append(pytest.param(importlib.import_module("agrimon._speedups"), id="cython"))
except ImportError:
    _BACKENDS.append(pytest.param(None, id="cython", marks=pytest.mark.skip("extension not built")))


def pytest_generate_tests(metafunc):
    if "kernels" in metafunc.fixturenames:
        metafunc.parametrize("kernels", _BACKENDS)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
