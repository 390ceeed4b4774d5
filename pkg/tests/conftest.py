import sys

import numpy as np
import pytest

from avi.locquant import QuantConfig, extend_vocabulary
from avi.predictor import TokenContext
from avi.shapes import default_codebook


@pytest.fixture(scope="session")
def codebook():
    return default_codebook(512, 0)


@pytest.fixture(scope="session")
def ctx(codebook):
    return TokenContext(extend_vocabulary(1000, codebook.k), codebook, QuantConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance") and hasattr(m, "LINES")), None)
    if mod is None or not mod.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.LINES:
        terminalreporter.write_line(line)
