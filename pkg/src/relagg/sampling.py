"""Seeded random edge subsets shared by limited-neighbour naive Bayes and dropout."""
from __future__ import annotations

import zlib

import numpy as np


def user_rng(seed: int, user: str) -> np.random.Generator:
    """Generator that depends only on ``(seed, user)``, never on call order."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(str(user).encode())])


def subset_rows(rng: np.random.Generator, degree: int, k: int, n_samples: int) -> np.ndarray:
    """``(n_samples, min(k, degree))`` positions drawn uniformly without replacement.

    Each row is sorted so sums over a subset run in a canonical order.
    """
    k = min(k, degree)
    if k == degree:
        return np.broadcast_to(np.arange(degree), (n_samples, degree))
    picks = np.argsort(rng.random((n_samples, degree)), axis=1)[:, :k]
    return np.sort(picks, axis=1)
