"""Profile congruence and optimal class matching shared across modules."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment


def tucker_phi(x, y) -> float:
    """Tucker's congruence coefficient between two profile vectors."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    denom = np.sqrt(np.dot(x, x) * np.dot(y, y))
    if denom == 0:
        return 0.0
    return float(np.clip(np.dot(x, y) / denom, -1.0, 1.0))


def phi_matrix(profiles_a: np.ndarray, profiles_b: np.ndarray) -> np.ndarray:
    """phi[k, m] between row profile k of ``a`` and row profile m of ``b``."""
    a = np.asarray(profiles_a, dtype=float)
    b = np.asarray(profiles_b, dtype=float)
    na = np.sqrt(np.sum(a * a, axis=1))
    nb = np.sqrt(np.sum(b * b, axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        phi = (a @ b.T) / np.outer(na, nb)
    return np.clip(np.nan_to_num(phi), -1.0, 1.0)


def optimal_matching(phi: np.ndarray) -> np.ndarray:
    """Permutation ``perm`` maximizing sum_k phi[k, perm[k]].

    Ties resolve deterministically through the assignment solver's
    lowest-index preference.
    """
    rows, cols = linear_sum_assignment(-np.asarray(phi))
    perm = np.empty(len(rows), dtype=int)
    perm[rows] = cols
    return perm
