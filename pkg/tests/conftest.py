import numpy as np
import pytest

from ilcset import Dataset, GroundSet, Subset

# The running example: 12 operators choosing 3 of 10 items, with one
# response ({5,6,8}) sharing nothing with the consensus {1,2,3}.
EXAMPLE_ROWS = [
    (1, 2, 3), (1, 2, 3), (1, 2, 3), (1, 2, 7), (1, 2, 3), (1, 2, 3),
    (1, 2, 4), (1, 2, 3), (2, 3, 8), (1, 2, 3), (1, 2, 3), (5, 6, 8),
]


@pytest.fixture(scope="session")
def ground10():
    return GroundSet(10)


@pytest.fixture(scope="session")
def example_dataset(ground10):
    obs = tuple(
        (f"X{i + 1}", Subset.from_indices(ground10, [j - 1 for j in row]))
        for i, row in enumerate(EXAMPLE_ROWS)
    )
    return Dataset(ground10, 3, obs)


def sub(ground, *items):
    """Subset from 1-based item numbers."""
    return Subset.from_indices(ground, [i - 1 for i in items])


def popcount_and(a: int, b: int) -> int:
    return bin(a & b).count("1")


def total_variation(support_a, support_b) -> float:
    pa = {s.mask: p for s, p in support_a}
    pb = {s.mask: p for s, p in support_b}
    return 0.5 * sum(
        abs(pa.get(m, 0.0) - pb.get(m, 0.0)) for m in set(pa) | set(pb)
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
