import os
import sys
from pathlib import Path

import numpy as np
import pytest

# Add bacon_backend to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from shared.models import BinaryDesignMatrix  # noqa: E402


def pytest_collection_modifyitems(config, items):
    if os.getenv("BACON_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set BACON_RUN_SLOW=1 to run acceptance-scale checks")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def block_bits():
    """Two blocks of identical columns plus a complement column: 12 x 5."""
    gen = np.random.default_rng(7)
    a = gen.integers(0, 2, 12)
    b = gen.integers(0, 2, 12)
    a[:2] = (0, 1)
    b[:2] = (1, 0)
    bits = np.column_stack([a, a, b, b, 1 - a]).astype(np.uint8)
    return bits


@pytest.fixture
def block_matrix(block_bits):
    matrix, _ = BinaryDesignMatrix.from_bits(block_bits)
    return matrix
