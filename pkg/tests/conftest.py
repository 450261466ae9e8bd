"""Shared helpers: finite-difference oracles and small data fixtures."""

import numpy as np
import pytest

from umlab.datahub import Dataset
from umlab.streams import substream


def central_fd(f, x0: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function over a flat vector."""
    g = np.empty(x0.size)
    for i in range(x0.size):
        xp = x0.copy()
        xp[i] += h
        fp = f(xp)
        xp[i] -= 2 * h
        fm = f(xp)
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(analytic: np.ndarray, reference: np.ndarray, floor: float = 1e-6) -> float:
    """Worst relative error with a floored denominator.

    The floor keeps near-zero gradient components (whose finite differences
    are dominated by float64 cancellation) from reporting spurious blowups.
    """
    a = np.asarray(analytic).ravel()
    r = np.asarray(reference).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(r)), floor)
    return float(np.max(np.abs(a - r) / denom))


@pytest.fixture
def rng():
    return substream(1234, "tests")


@pytest.fixture
def blob_data():
    """Tiny labeled dataset: 4 well-separated clusters of 12 rows in 6-D."""
    gen = substream(77, "blobs")
    centers = gen.normal(scale=6.0, size=(4, 6))
    feats = np.repeat(centers, 12, axis=0) + gen.normal(scale=0.5, size=(48, 6))
    labels = np.repeat(np.arange(4), 12)
    return Dataset(features=feats, labels=labels)
