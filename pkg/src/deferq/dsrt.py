"""Blocking probability under deterministically spaced rearrivals (DSRT).

Deferred customers return exactly ``x`` time units apart. Time is split into
non-deferral periods (``d = 0``) and deferral phases, and each phase is a
sequence of stages of length ``x`` that end with one rearrival. The solver
combines

* the transient behaviour of the stage chain over ``[0, x]``,
* a DTMC over stage-start configurations plus a dummy "phase over" state,
* the stationary behaviour of the non-deferral chain, where a deferral phase
  collapses into a jump from ``(K, 0)`` to ``(l, 0)``,

into the long-run time fractions ``Pi[k, d]`` and the blocking probability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ctmc
from .model import (BlockingReport, NumericalError, PolicySpec, SystemParams,
                    effective_deferral_limit, erlang_b_report)


def blocking_single_closed_form(lam: float, mu: float, x: float) -> float:
    """Exact DSRT blocking probability for one server and at most one deferral."""
    if lam <= 0 or mu <= 0 or x < 0:
        raise ValueError("rates must be positive and x non-negative")
    rho = lam / mu
    if math.isinf(x):
        return rho / (1 + rho)
    gain = rho * -math.expm1(-(lam + mu) * x) / ((1 + rho) ** 2 * (1 + rho * (1 + lam * x)))
    return rho / (1 + rho) - gain


def optimal_x_bracket(lam: float, mu: float) -> tuple[float, float]:
    """Interval known to contain the optimal spacing when K = D = 1."""
    if lam <= 0 or mu <= 0:
        raise ValueError("rates must be positive")
    return 1.0 / (lam + mu), math.sqrt(2.0) / lam


@dataclass(frozen=True)
class StageTransientBundle:
    """Transient behaviour of one deferral stage from every possible start.

    Rows of ``end`` and ``occupancy`` follow ``starts``; columns index stage
    configurations ``(k, d)``, ``d = 1..D``, via ``ctmc.config_index(k, d, K, 1)``.
    """

    K: int
    D: int
    x: float
    starts: tuple[tuple[int, int], ...]
    end: np.ndarray
    occupancy: np.ndarray

    def col(self, k: int, d: int) -> int:
        return ctmc.config_index(k, d, self.K, 1)

    def start_row(self, k: int, d: int) -> int:
        return self.starts.index((k, d))


@dataclass(frozen=True)
class StartConfigChain:
    """DTMC of stage-start configurations; the last state is the dummy state."""

    states: tuple
    matrix: np.ndarray
    stationary: np.ndarray

    DUMMY = "D"

    @property
    def dummy_mass(self) -> float:
        return float(self.stationary[-1])


def stage_start_configs(K: int, D: int) -> tuple[tuple[int, int], ...]:
    if D == 1:
        return ((K, 1),)
    return tuple((k, d) for d in range(1, D) for k in range(1, K + 1))


def stage_transients(p: SystemParams, x: float, D: int) -> StageTransientBundle:
    if x <= 0:
        raise ValueError("stage length must be positive")
    K = p.num_servers
    Q = ctmc.build_stage_generator(p, D)
    E, occ = ctmc.transient_matrices(Q, x)
    starts = stage_start_configs(K, D)
    rows = [ctmc.config_index(k, d, K, 1) for k, d in starts]
    end = np.clip(E[rows], 0.0, None)
    occupancy = np.clip(occ[rows], 0.0, None)
    return StageTransientBundle(K=K, D=D, x=x, starts=starts, end=end, occupancy=occupancy)


def start_config_chain(bundle: StageTransientBundle) -> StartConfigChain:
    K, D = bundle.K, bundle.D
    starts = bundle.starts
    n = len(starts)
    dummy = n
    index = {c: i for i, c in enumerate(starts)}
    P = np.zeros((n + 1, n + 1))
    for i in range(n):
        row = bundle.end[i]
        for d_next in range(1, D):
            for k_next in range(1, K):
                P[i, index[(k_next, d_next)]] = row[bundle.col(k_next - 1, d_next + 1)]
            P[i, index[(K, d_next)]] = row[bundle.col(K - 1, d_next + 1)] + row[bundle.col(K, d_next + 1)]
        P[i, dummy] = row[bundle.col(0, 1):bundle.col(K, 1) + 1].sum()
    P[dummy, index[(K, 1)]] = 1.0
    P /= P.sum(axis=1, keepdims=True)

    # starts the phase never reaches (numerically zero mass) are left out of the solve
    live = ctmc.reachable_from(P, dummy)
    stationary = np.zeros(n + 1)
    try:
        stationary[live] = ctmc.dtmc_stationary(P[np.ix_(live, live)])
    except ctmc.NotIrreducible as exc:
        raise NumericalError(f"stage-start chain is not irreducible: {exc}") from exc
    return StartConfigChain(states=starts + (StartConfigChain.DUMMY,), matrix=P, stationary=stationary)


def _level_one_rows(bundle: StageTransientBundle):
    return [i for i, (_, d) in enumerate(bundle.starts) if d == 1]


def _phase_exit_mass(chain: StartConfigChain, bundle: StageTransientBundle) -> float:
    """Sum over (j, 1) starts of P_start * Pr[stage ends with d = 1]."""
    lo, hi = bundle.col(0, 1), bundle.col(bundle.K, 1) + 1
    rows = _level_one_rows(bundle)
    return float(sum(chain.stationary[i] * bundle.end[i, lo:hi].sum() for i in rows))


def phase_end_probs(chain: StartConfigChain, bundle: StageTransientBundle) -> np.ndarray:
    """``alpha[l - 1]``: probability that a deferral phase ends in ``(l, 0)``."""
    K = bundle.K
    rows = _level_one_rows(bundle)
    denom = _phase_exit_mass(chain, bundle)
    if denom <= 0:
        raise NumericalError("deferral phases never end")
    alpha = np.zeros(K)
    for l in range(1, K):
        num = sum(chain.stationary[i] * bundle.end[i, bundle.col(l - 1, 1)] for i in rows)
        alpha[l - 1] = num / denom
    alpha[K - 1] = max(0.0, 1.0 - alpha[: K - 1].sum())
    return alpha / alpha.sum()


@dataclass(frozen=True)
class _Solution:
    D: int
    bundle: StageTransientBundle
    chain: StartConfigChain
    alpha: np.ndarray
    table: np.ndarray
    exit_mass: float


def _solve(p: SystemParams, x: float) -> _Solution | None:
    D = effective_deferral_limit(p, PolicySpec.dsrt(x))
    if D == 0:
        return None
    K, lam = p.num_servers, p.arrival_rate
    bundle = stage_transients(p, x, D)
    chain = start_config_chain(bundle)
    alpha = phase_end_probs(chain, bundle)

    # non-deferral configurations, up to scale
    base = ctmc.ctmc_stationary(ctmc.build_nondeferral_generator(p, alpha))
    # deferral configurations, up to scale: expected occupancy per stage weighted by start frequency
    weights = chain.stationary[:-1] @ bundle.occupancy
    weights = weights.reshape(D, K + 1).T

    # couple the two scales: phases start at rate lam * Pi[K, 0] and each stage of
    # length x ends the phase with probability exit / (1 - P_start[dummy])
    exit_mass = _phase_exit_mass(chain, bundle)
    stage_exit = exit_mass / (1.0 - chain.dummy_mass)
    w_total = weights.sum()
    if w_total <= 0 or stage_exit <= 0:
        raise ctmc.SingularSystem("deferral time fractions are degenerate")
    ratio = lam * base[K] * x / (w_total * stage_exit)
    s0 = 1.0 / (1.0 + ratio * w_total)
    table = np.empty((K + 1, D + 1))
    table[:, 0] = s0 * base
    table[:, 1:] = s0 * ratio * weights
    table /= table.sum()
    return _Solution(D=D, bundle=bundle, chain=chain, alpha=alpha, table=table, exit_mass=exit_mass)


def time_fractions(p: SystemParams, x: float) -> np.ndarray:
    """Long-run fraction of time in each configuration, shape ``(K + 1, D + 1)``."""
    sol = _solve(p, x)
    if sol is None:
        return erlang_b_report(p).table
    return sol.table


def blocking_general(p: SystemParams, x: float) -> BlockingReport:
    """DSRT blocking probability for arbitrary K and deferral limit.

    A spacing with ``floor(T_hat / x) = 0`` (or ``D_hat = 0``) allows no
    deferrals and yields the Erlang B report.
    """
    sol = _solve(p, x)
    if sol is None:
        return erlang_b_report(p)
    K, D, table, bundle = p.num_servers, sol.D, sol.table, sol.bundle
    arrival_blocked = float(table[K, D])
    full_cols = [bundle.col(K, l) for l in range(1, D + 1)]
    drops_per_stage = bundle.end[:, full_cols].sum(axis=1)
    expected_drops = float(sol.chain.stationary[:-1] @ drops_per_stage) / sol.exit_mass
    rearrival_blocked = float(table[K, 0]) * expected_drops
    return BlockingReport(total=arrival_blocked + rearrival_blocked,
                          arrival_blocked=arrival_blocked,
                          rearrival_blocked=rearrival_blocked,
                          table=table, deferral_limit=D, phase_end_probs=sol.alpha)
