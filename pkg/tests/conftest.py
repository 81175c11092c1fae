from __future__ import annotations

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_scored_instance(seed: int, min_n: int = 2000, max_n: int = 5000):
    """One random metric instance with deliberate score ties.

    Returns (scores float32 in [0, 1), labels int 0/1) with both classes
    present and a positive share of at least ~10%.
    """
    r = np.random.default_rng(seed)
    n = int(r.integers(min_n, max_n + 1))
    distinct = int(r.choice([3, 17, 101, 509, 2047]))
    scores = (r.integers(0, distinct, n).astype(np.float64) / distinct).astype(np.float32)
    if r.random() < 0.5:
        # Mix lattice ties with continuous values.
        wild = r.random(n) < 0.5
        scores[wild] = (r.random(wild.sum()) * 0.999).astype(np.float32)
    frac = float(r.uniform(0.12, 0.5))
    labels = (r.random(n) < frac).astype(np.int64)
    labels[0] = 1
    labels[1] = 0
    return scores, labels
