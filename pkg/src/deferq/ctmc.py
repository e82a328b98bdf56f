"""Generators, transient analysis and stationary solvers for finite Markov chains.

Configurations ``(k, d)`` (busy servers, deferred jobs) are stacked row-wise:
all ``k = 0..K`` for the lowest level first, then the next level, and so on.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg
from scipy.sparse import csgraph, csr_matrix
from scipy import stats

from .model import DeferqError, NumericalError, SystemParams

GENERATOR_TOL = 1e-12
STOCHASTIC_TOL = 1e-10


class NotIrreducible(DeferqError):
    pass


class SingularSystem(NumericalError):
    pass


class ConvergenceFailure(NumericalError):
    pass


class InvalidDistribution(DeferqError, ValueError):
    pass


def config_index(k: int, d: int, K: int, d_min: int = 0) -> int:
    if not 0 <= k <= K or d < d_min:
        raise IndexError(f"configuration ({k}, {d}) out of range for K={K}, d_min={d_min}")
    return (d - d_min) * (K + 1) + k


def config_from_index(i: int, K: int, d_min: int = 0) -> tuple[int, int]:
    if i < 0:
        raise IndexError(f"negative index {i}")
    d, k = divmod(i, K + 1)
    return k, d + d_min


def check_generator(Q: np.ndarray, tol: float = GENERATOR_TOL) -> None:
    Q = np.asarray(Q)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ValueError("generator must be square")
    off = Q - np.diag(np.diag(Q))
    if (off < 0).any():
        raise ValueError("generator has negative off-diagonal rates")
    scale = max(1.0, float(np.abs(Q).max(initial=0.0)))
    if np.abs(Q.sum(axis=1)).max(initial=0.0) > tol * scale:
        raise ValueError("generator rows do not sum to zero")


def check_stochastic(P: np.ndarray, tol: float = STOCHASTIC_TOL) -> None:
    P = np.asarray(P)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError("transition matrix must be square")
    if (P < -tol).any() or (P > 1 + tol).any():
        raise ValueError("transition probabilities outside [0, 1]")
    if np.abs(P.sum(axis=1) - 1.0).max(initial=0.0) > tol:
        raise ValueError("transition matrix rows do not sum to one")


def _birth_death_block(K: int, lam: float, mu: float) -> np.ndarray:
    """M/M/K/K generator: births at ``lam`` below K, deaths at ``k * mu``."""
    Q = np.zeros((K + 1, K + 1))
    for k in range(K):
        Q[k, k + 1] = lam
        Q[k + 1, k] = (k + 1) * mu
    Q[np.diag_indices(K + 1)] = -Q.sum(axis=1)
    return Q


def build_stage_generator(p: SystemParams, D: int) -> np.ndarray:
    """Generator of one deferral stage over levels ``d = 1..D``.

    Within a level the busy count is birth-death; an arrival finding all
    servers busy is deferred (level up) unless the level is ``D``, where it
    is lost. Nothing moves a level down inside a stage.
    """
    if D < 1:
        raise ValueError("a deferral stage needs D >= 1")
    K, lam = p.num_servers, p.arrival_rate
    n = K + 1
    Q2 = _birth_death_block(K, lam, p.service_rate)
    Q1 = Q2.copy()
    Q1[K, K] -= lam
    Q = np.zeros((n * D, n * D))
    for level in range(D - 1):
        s = level * n
        Q[s:s + n, s:s + n] = Q1
        Q[s + K, s + n + K] = lam
    s = (D - 1) * n
    Q[s:s + n, s:s + n] = Q2
    return Q


def build_nondeferral_generator(p: SystemParams, alpha) -> np.ndarray:
    """Generator over ``(l, 0)`` with deferral phases collapsed into jumps.

    From ``(K, 0)`` a deferral phase starts at rate ``lam`` and returns the
    chain to ``(l, 0)`` with probability ``alpha[l - 1]``.
    """
    K, lam = p.num_servers, p.arrival_rate
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (K,):
        raise InvalidDistribution(f"expected {K} phase-end probabilities, got shape {alpha.shape}")
    if (alpha < -1e-12).any() or abs(alpha.sum() - 1.0) > 1e-9:
        raise InvalidDistribution("phase-end probabilities must be non-negative and sum to 1")
    Q = _birth_death_block(K, lam, p.service_rate)
    for l in range(1, K):
        Q[K, l] += lam * max(alpha[l - 1], 0.0)
    Q[K, K] = 0.0
    Q[K, K] = -Q[K].sum()
    return Q


def build_esrt_generator(p: SystemParams, alpha_rate: float, D: int) -> np.ndarray:
    """Generator of the ESRT chain over ``(k, d)``, ``d = 0..D``."""
    if D < 1:
        raise ValueError("ESRT chain needs D >= 1")
    K, lam, mu = p.num_servers, p.arrival_rate, p.service_rate
    n = K + 1
    Q = np.zeros((n * (D + 1), n * (D + 1)))
    for d in range(D + 1):
        s = d * n
        Q[s:s + n, s:s + n] = _birth_death_block(K, lam, mu)
        if d < D:
            Q[s + K, s + n + K] = lam
        if d >= 1:
            below = s - n
            for k in range(K):
                Q[s + k, below + k + 1] = alpha_rate
            Q[s + K, below + K] = alpha_rate
    np.fill_diagonal(Q, 0.0)
    Q[np.diag_indices_from(Q)] = -Q.sum(axis=1)
    return Q


def _expm(A: np.ndarray) -> np.ndarray:
    E = scipy.linalg.expm(A)
    if not np.isfinite(E).all():
        raise ConvergenceFailure("matrix exponential did not produce finite values")
    return E


def transient_matrix(Q: np.ndarray, t: float) -> np.ndarray:
    """``exp(Q t)``; row ``i`` is the distribution at ``t`` started from state ``i``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    Q = np.asarray(Q, dtype=float)
    if t == 0:
        return np.eye(Q.shape[0])
    return _expm(Q * t)


def transient_matrices(Q: np.ndarray, x: float) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(exp(Qx), int_0^x exp(Qt) dt)`` from one augmented exponential.

    The exponential of ``[[Q, I], [0, 0]] * x`` carries the first in its top-left
    block and the integral in its top-right block.
    """
    if x <= 0:
        raise ValueError("x must be positive")
    Q = np.asarray(Q, dtype=float)
    n = Q.shape[0]
    M = np.zeros((2 * n, 2 * n))
    M[:n, :n] = Q * x
    M[:n, n:] = np.eye(n) * x
    E = _expm(M)
    return E[:n, :n], E[:n, n:]


def transient_distribution(init, Q: np.ndarray, t: float) -> np.ndarray:
    init = np.asarray(init, dtype=float)
    if init.shape != (np.shape(Q)[0],):
        raise ValueError("initial distribution does not match generator size")
    p = init @ transient_matrix(Q, t)
    return np.clip(p, 0.0, None)


def transient_occupancy(init, Q: np.ndarray, x: float) -> np.ndarray:
    """Expected time spent in each state over ``[0, x]``."""
    init = np.asarray(init, dtype=float)
    if init.shape != (np.shape(Q)[0],):
        raise ValueError("initial distribution does not match generator size")
    _, occ = transient_matrices(Q, x)
    return np.clip(init @ occ, 0.0, None)


def _uniformize(Q: np.ndarray):
    Q = np.asarray(Q, dtype=float)
    q = float(-np.diag(Q).min(initial=0.0))
    if q == 0.0:
        return 0.0, np.eye(Q.shape[0])
    return q, np.eye(Q.shape[0]) + Q / q


def uniformized_transient_matrix(Q: np.ndarray, t: float, tol: float = 1e-14) -> np.ndarray:
    """``exp(Q t)`` by uniformization; the independent check on :func:`transient_matrix`."""
    q, P = _uniformize(Q)
    if q == 0.0 or t == 0:
        return np.eye(P.shape[0])
    qt = q * t
    n_max = int(stats.poisson.isf(tol, qt)) + 10
    weights = stats.poisson.pmf(np.arange(n_max + 1), qt)
    out = np.zeros_like(P)
    term = np.eye(P.shape[0])
    for w in weights:
        out += w * term
        term = term @ P
    return out


def uniformized_occupancy_matrix(Q: np.ndarray, x: float, tol: float = 1e-14) -> np.ndarray:
    """``int_0^x exp(Q t) dt`` by uniformization: ``(1/q) sum_n P^n Pr[N(qx) > n]``."""
    q, P = _uniformize(Q)
    if q == 0.0:
        return np.eye(P.shape[0]) * x
    qx = q * x
    n_max = int(stats.poisson.isf(tol, qx)) + 10
    tails = stats.poisson.sf(np.arange(n_max + 1), qx)
    out = np.zeros_like(P)
    term = np.eye(P.shape[0])
    for w in tails:
        out += w * term
        term = term @ P
    return out / q


def _is_irreducible(M: np.ndarray) -> bool:
    pattern = csr_matrix(np.asarray(M) != 0)
    n_comp, _ = csgraph.connected_components(pattern, directed=True, connection="strong")
    return n_comp == 1


def reachable_from(M: np.ndarray, start: int) -> np.ndarray:
    """Sorted indices reachable from ``start`` along nonzero entries of ``M``."""
    pattern = csr_matrix(np.asarray(M) != 0)
    order = csgraph.breadth_first_order(pattern, start, directed=True, return_predecessors=False)
    return np.sort(order)


def _solve_balance(A: np.ndarray) -> np.ndarray:
    # A is the transposed balance operator; swap the last equation for normalization
    n = A.shape[0]
    A = A.copy()
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    try:
        pi = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    if not np.isfinite(pi).all():
        raise SingularSystem("stationary solve produced non-finite values")
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def dtmc_stationary(P: np.ndarray, check: bool = True) -> np.ndarray:
    """Stationary distribution ``pi P = pi`` of an irreducible DTMC."""
    P = np.asarray(P, dtype=float)
    if check:
        check_stochastic(P)
    if P.shape[0] == 1:
        return np.ones(1)
    if not _is_irreducible(P - np.diag(np.diag(P))):
        raise NotIrreducible("transition matrix is not irreducible")
    pi = _solve_balance(P.T - np.eye(P.shape[0]))
    resid = np.abs(pi @ P - pi).max()
    if resid > 1e-12:
        pi = _refine(pi, P.T - np.eye(P.shape[0]))
    return pi


def ctmc_stationary(Q: np.ndarray, check: bool = True) -> np.ndarray:
    """Stationary distribution ``pi Q = 0`` of an irreducible CTMC."""
    Q = np.asarray(Q, dtype=float)
    if check:
        check_generator(Q, tol=1e-10)
    if Q.shape[0] == 1:
        return np.ones(1)
    if not _is_irreducible(Q - np.diag(np.diag(Q))):
        raise NotIrreducible("generator is not irreducible")
    pi = _solve_balance(Q.T)
    scale = max(1.0, float(np.abs(Q).max()))
    if np.abs(pi @ Q).max() > 1e-10 * scale:
        pi = _refine(pi, Q.T)
    return pi


def _refine(pi: np.ndarray, A: np.ndarray, steps: int = 3) -> np.ndarray:
    # iterative refinement on the bordered system
    n = A.shape[0]
    B = A.copy()
    B[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    for _ in range(steps):
        r = b - B @ pi
        pi = pi + np.linalg.solve(B, r)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()
