import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable


@pytest.fixture
def write_csv(tmp_path):
    """Write CSV text (list of rows) to a temp file and return its path."""

    def _write(rows, name="flows.csv"):
        path = tmp_path / name
        path.write_text("\n".join(",".join(str(c) for c in row) for row in rows) + "\n")
        return path

    return _write


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
