import numpy as np


def random_generator(rng: np.random.Generator, n: int, density: float = 0.6, scale: float = 5.0) -> np.ndarray:
    """Dense-ish random generator, irreducible thanks to a cycle through all states."""
    Q = rng.uniform(0, scale, (n, n)) * (rng.random((n, n)) < density)
    for i in range(n):
        Q[i, (i + 1) % n] += rng.uniform(0.1, scale)
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return Q


def generator_balance(Q: np.ndarray) -> np.ndarray:
    """Stationary vector from the null space via SVD, independent of the package solver."""
    _, _, vh = np.linalg.svd(Q.T)
    v = vh[-1]
    return v / v.sum()
