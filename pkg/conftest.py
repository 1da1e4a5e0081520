from typing import Generator

import numpy as np
import pytest


@pytest.fixture(scope="module")
def rng() -> Generator[np.random.Generator, None, None]:
    """Seeded generator for tests drawing random trees, graphs or volumes.

    Yields:
        Generator[np.random.Generator, None, None]: The generator shared by a test module.
    """
    rng: np.random.Generator = np.random.default_rng(12345)
    yield rng
