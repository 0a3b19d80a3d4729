import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from src.numkit import make_rng  # noqa: E402


@pytest.fixture
def rng():
    return make_rng(1234)
