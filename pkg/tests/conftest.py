import sys
from pathlib import Path

import numpy as np
import pytest

SRC = Path(__file__).resolve().parents[1] / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from system.case_loader import CaseLoader  # noqa: E402
from utils import set_verbosity  # noqa: E402


@pytest.fixture(autouse=True)
def quiet_console():
    set_verbosity(0)
    yield
    set_verbosity(1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def loader():
    return CaseLoader()
