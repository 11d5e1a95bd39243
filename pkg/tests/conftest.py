import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

SPECS_DIR = Path(__file__).parent.parent / "specs"


@pytest.fixture
def specs_dir() -> Path:
    return SPECS_DIR
