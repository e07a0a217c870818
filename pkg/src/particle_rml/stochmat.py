"""Column-stochastic matrix utilities: ergodicity coefficients and projected products.

Test machinery for the particle weight recursion.  The Dobrushin coefficient
tau(A) of a column-stochastic matrix measures how strongly A contracts
differences of probability vectors; it is sub-multiplicative under products,
and matrices whose entries are floored at alpha/N satisfy tau <= 1 - alpha.
Products accumulated against the centering projector Lambda = I - e e^T / N
therefore shrink geometrically, which is what keeps the centered particle
weights bounded.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "centering_matrix",
    "dobrushin_tau",
    "lambda_product_norm",
    "random_floored_stochastic",
    "is_column_stochastic",
]


def centering_matrix(n: int) -> np.ndarray:
    """Lambda = I - e e^T / n, the projector that removes the common column mean."""
    return np.eye(n) - np.full((n, n), 1.0 / n)


def is_column_stochastic(a: np.ndarray, tol: float = 1e-10) -> bool:
    a = np.asarray(a, dtype=float)
    return (
        a.ndim == 2
        and a.shape[0] == a.shape[1]
        and bool(np.all(a >= -tol))
        and bool(np.max(np.abs(a.sum(axis=0) - 1.0)) <= tol)
    )


def dobrushin_tau(a: np.ndarray) -> float:
    """Dobrushin ergodicity coefficient of a column-stochastic matrix.

    tau(A) = 1 - min over column pairs of the summed entrywise minima.  The
    pairwise scan is O(N^3), fine at test scale.
    """
    a = np.asarray(a, dtype=float)
    if not is_column_stochastic(a):
        raise ValueError("matrix must be column-stochastic")
    # overlap[j', j''] = sum_i min(A[i, j'], A[i, j''])
    overlap = np.minimum(a[:, :, None], a[:, None, :]).sum(axis=0)
    return float(1.0 - overlap.min())


def lambda_product_norm(matrices) -> float:
    """Frobenius norm of A_1 ... A_n Lambda, accumulated right-to-left."""
    mats = [np.asarray(m, dtype=float) for m in matrices]
    if not mats:
        raise ValueError("need at least one matrix")
    n = mats[0].shape[0]
    for m in mats:
        if m.shape != (n, n):
            raise ValueError("all matrices must share one square shape")
    acc = centering_matrix(n)
    for m in reversed(mats):
        acc = m @ acc
    return float(np.linalg.norm(acc))


def random_floored_stochastic(n: int, alpha: float, gen: np.random.Generator) -> np.ndarray:
    """Random column-stochastic matrix with every entry >= alpha / n.

    Convex mixture of the uniform matrix and a random column-stochastic one,
    the standard way to realize the entry floor of the contraction lemmas.
    """
    if not (0.0 < alpha <= 1.0):
        raise ValueError("alpha must lie in (0, 1]")
    raw = gen.random((n, n)) + 1e-12
    raw /= raw.sum(axis=0, keepdims=True)
    return alpha * np.full((n, n), 1.0 / n) + (1.0 - alpha) * raw
