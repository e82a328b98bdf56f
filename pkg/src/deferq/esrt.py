"""Blocking probability under exponentially spaced rearrivals (ESRT).

The state ``(k, d)`` is a finite CTMC. Its stationary distribution is
computed level by level: the top level ``D`` is fixed up to scale by its own
balance equations, and lower levels follow from ``Pi_d = Pi_{d+1} R`` and
``Pi_0 = Pi_1 R1``. The full-generator solve is kept alongside as the
reference route.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ctmc
from .model import (BlockingReport, NumericalError, PolicySpec, SystemParams,
                    effective_deferral_limit, erlang_b_report)


class NegativeProbability(NumericalError):
    pass


@dataclass(frozen=True)
class LevelMatrices:
    A_alpha: np.ndarray
    B_alpha: np.ndarray
    A_zero: np.ndarray
    R: np.ndarray
    R1: np.ndarray


@dataclass(frozen=True)
class EsrtStationary:
    levels: np.ndarray  # levels[d] is the row vector Pi_d, shape (D + 1, K + 1)
    scale: float
    seed: np.ndarray  # top-level vector with its last entry pinned to 1

    @property
    def table(self) -> np.ndarray:
        """``table[k, d]``, the same layout as the DSRT time-fraction table."""
        return self.levels.T


def _level_operator(p: SystemParams, alpha_rate: float) -> np.ndarray:
    K, lam, mu = p.num_servers, p.arrival_rate, p.service_rate
    A = np.zeros((K + 1, K + 1))
    for j in range(K):
        A[j, j] = lam + j * mu + alpha_rate
        if j + 1 < K:
            A[j, j + 1] = -lam
        A[j + 1, j] = -(j + 1) * mu
    # the last column encodes the cut between levels, lam * Pi[K, d]
    A[K, K] = lam
    return A


def build_level_matrices(p: SystemParams, alpha_rate: float) -> LevelMatrices:
    if alpha_rate <= 0:
        raise ValueError("alpha must be positive")
    K = p.num_servers
    A_alpha = _level_operator(p, alpha_rate)
    A_zero = _level_operator(p, 0.0)
    B = np.zeros((K + 1, K + 1))
    for j in range(1, K):
        B[j - 1, j] = alpha_rate
    B[:, K] = alpha_rate
    try:
        R = np.linalg.solve(A_alpha.T, B.T).T
        R1 = np.linalg.solve(A_zero.T, B.T).T
    except np.linalg.LinAlgError as exc:
        raise ctmc.SingularSystem(f"level matrix is singular: {exc}") from exc
    return LevelMatrices(A_alpha=A_alpha, B_alpha=B, A_zero=A_zero, R=R, R1=R1)


def _top_level_seed(p: SystemParams, alpha_rate: float) -> np.ndarray:
    """Solve the K balance equations of the top level with ``Pi[K, D] = 1``."""
    K, lam, mu = p.num_servers, p.arrival_rate, p.service_rate
    if K == 0:
        return np.ones(1)
    # equation j (j = 0..K-1): (lam + j mu + alpha) v_j - lam v_{j-1} - (j+1) mu v_{j+1} = 0
    M = np.zeros((K, K))
    rhs = np.zeros(K)
    for j in range(K):
        M[j, j] = lam + j * mu + alpha_rate
        if j >= 1:
            M[j, j - 1] = -lam
        if j + 1 < K:
            M[j, j + 1] = -(j + 1) * mu
        else:
            rhs[j] = K * mu
    try:
        v = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as exc:
        raise ctmc.SingularSystem(str(exc)) from exc
    return np.append(v, 1.0)


def _base_level(p: SystemParams, alpha_rate: float, level_one: np.ndarray) -> np.ndarray:
    """``Pi_0 = Pi_1 R1`` evaluated through the cut equations of level 0.

    Cutting level 0 between ``j`` and ``j + 1`` gives
    ``lam Pi[j, 0] = (j + 1) mu Pi[j + 1, 0] + alpha sum_{i < j} Pi[i, 1]``, so the
    level can be filled from ``k = K`` downward using sums of positive terms.
    A generic solve with ``A(0)`` loses all accuracy once the level spans many
    orders of magnitude (light load, large K).
    """
    K, lam, mu = p.num_servers, p.arrival_rate, p.service_rate
    inflow = alpha_rate * np.concatenate(([0.0], np.cumsum(level_one[:-1])))
    out = np.empty(K + 1)
    out[K] = alpha_rate * level_one.sum() / lam
    for j in range(K - 1, -1, -1):
        out[j] = ((j + 1) * mu * out[j + 1] + inflow[j]) / lam
    return out


def stationary_matrix_geometric(p: SystemParams, alpha_rate: float, D: int) -> EsrtStationary:
    if D < 1:
        raise ValueError("D must be at least 1")
    K = p.num_servers
    mats = build_level_matrices(p, alpha_rate)
    seed = _top_level_seed(p, alpha_rate)
    levels = np.empty((D + 1, K + 1))
    levels[D] = seed
    for d in range(D - 1, 0, -1):
        levels[d] = levels[d + 1] @ mats.R
    levels[0] = _base_level(p, alpha_rate, levels[1])
    total = levels.sum()
    if not np.isfinite(total) or total <= 0:
        raise ctmc.SingularSystem("level recursion produced an unusable total")
    levels /= total
    if levels.min() < -1e-12:
        raise NegativeProbability(f"level recursion produced {levels.min():.3e}")
    levels = np.clip(levels, 0.0, None)
    return EsrtStationary(levels=levels, scale=1.0 / total, seed=seed)


def stationary_full_generator(p: SystemParams, alpha_rate: float, D: int) -> EsrtStationary:
    """Reference route: direct solve of the whole ESRT generator."""
    K = p.num_servers
    pi = ctmc.ctmc_stationary(ctmc.build_esrt_generator(p, alpha_rate, D))
    levels = pi.reshape(D + 1, K + 1)
    scale = levels[D, K]
    seed = levels[D] / scale if scale > 0 else levels[D].copy()
    return EsrtStationary(levels=levels, scale=float(scale), seed=seed)


def _report(p: SystemParams, alpha_rate: float, D: int, st: EsrtStationary) -> BlockingReport:
    K, lam = p.num_servers, p.arrival_rate
    arrival_blocked = float(st.levels[D, K])
    rearrival_blocked = float(alpha_rate / lam * st.levels[1:, K].sum())
    return BlockingReport(total=arrival_blocked + rearrival_blocked,
                          arrival_blocked=arrival_blocked,
                          rearrival_blocked=rearrival_blocked,
                          table=st.table, deferral_limit=D)


def blocking(p: SystemParams, alpha_rate: float, method: str = "matrix-geometric") -> BlockingReport:
    """ESRT blocking probability with deferral limit ``min(D_hat, floor(T_hat * alpha))``.

    ``method`` is ``"matrix-geometric"`` (default) or ``"full-generator"``.
    """
    D = effective_deferral_limit(p, PolicySpec.esrt(alpha_rate))
    if D == 0:
        return erlang_b_report(p)
    if method == "matrix-geometric":
        st = stationary_matrix_geometric(p, alpha_rate, D)
    elif method == "full-generator":
        st = stationary_full_generator(p, alpha_rate, D)
    else:
        raise ValueError(f"unknown method {method!r}")
    return _report(p, alpha_rate, D, st)


def blocking_single_server_closed_form(lam: float, mu: float, alpha_rate: float, D: int) -> float:
    """Explicit ESRT blocking probability for one server and deferral limit ``D``.

    With ``a = lam / alpha`` and ``b = (lam + alpha) / (lam + alpha + mu)`` the
    textbook form is a ratio of two polynomials in ``ab`` that both vanish at
    ``ab = 1``; the common factor ``ab - 1`` is divided out here, leaving
    ``busy * ((ab)^D + b S) / (1 + a busy S)`` with ``S = sum_{i<D} (ab)^i``.
    """
    if D < 1:
        raise ValueError("D must be at least 1")
    a = lam / alpha_rate
    b = (lam + alpha_rate) / (lam + alpha_rate + mu)
    ab = a * b
    busy = lam / (lam + mu)
    geometric = sum(ab ** i for i in range(D))
    return busy * (ab ** D + b * geometric) / (1.0 + a * busy * geometric)
