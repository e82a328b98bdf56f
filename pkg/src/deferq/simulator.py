"""Discrete-event simulation of the M/M/K/K system with deferrals.

The event loop is compiled with numba and consumes pre-drawn random numbers:
for every exogenous arrival one inter-arrival time, one service requirement
(used whenever that customer is eventually admitted) and one uniform variate
for the policy. Draws come from a PCG64 stream per replication, derived from
``(seed, replication index)`` with :class:`numpy.random.SeedSequence`, in
fixed-size chunks, so results are reproducible bit for bit.

Events at equal timestamps are ordered rearrival, then exogenous arrival,
then service completion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np
from scipy import stats

from .model import (DeferqError, PolicyKind, PolicySpec, SystemParams,
                    effective_deferral_limit)

CHUNK = 1 << 16

_KIND_CODE = {
    PolicyKind.NO_DEFERRAL: 0,
    PolicyKind.FIXED_MAX: 1,
    PolicyKind.UNIFORM_RANDOM: 2,
    PolicyKind.DSRT: 3,
    PolicyKind.ESRT: 4,
}

# indices into the integer state vector
_BUSY, _PENDING, _COUNTED_PENDING, _MEASURING, _NEXT_ARRIVAL = range(5)
# indices into the float state vector
_ARRIVAL_CLOCK, _LAST_SCHEDULED, _LAST_EVENT = range(3)
# indices into the counter vector
_ARRIVALS, _DEFERRALS, _DROP_ARRIVAL, _DROP_REARRIVAL, _PHASE_ENDS = range(5)


class InvalidHorizon(DeferqError, ValueError):
    pass


@numba.njit(cache=True)
def _rearrival_time(kind, param, t_hat, limit, n_pending, last_scheduled, now, u):
    """Scheduled return time for a customer who found every server busy; -1 means drop."""
    if kind == 0 or n_pending >= limit:
        return -1.0
    if kind == 1:
        return now + t_hat
    if kind == 2:
        return now + t_hat * u
    base = now if n_pending == 0 else last_scheduled
    if kind == 3:
        return base + param
    return base - math.log1p(-u) / param


@numba.njit(cache=True, nogil=True)
def _advance(t, istate, fstate, occ):
    if istate[_MEASURING] == 1:
        occ[istate[_BUSY], istate[_PENDING]] += t - fstate[_LAST_EVENT]
    fstate[_LAST_EVENT] = t


@numba.njit(cache=True, nogil=True)
def _run_chunk(kind, param, t_hat, limit, K, inter, serv, unif, n_total, warmup,
               istate, fstate, completions, pend_t, pend_s, pend_c,
               counters, occ, phase_hist):
    """Consume one chunk of arrivals. Returns True once every counted customer is resolved."""
    inf = np.inf
    for j in range(inter.shape[0]):
        g = istate[_NEXT_ARRIVAL]
        if g >= n_total and istate[_COUNTED_PENDING] == 0:
            return True
        t_arr = fstate[_ARRIVAL_CLOCK] + inter[j]

        while True:
            busy = istate[_BUSY]
            n = istate[_PENDING]
            tc = inf
            ic = -1
            for s in range(busy):
                if completions[s] < tc:
                    tc = completions[s]
                    ic = s
            tr = inf
            ir = -1
            for s in range(n):
                if pend_t[s] < tr:
                    tr = pend_t[s]
                    ir = s
            if tr <= tc and tr <= t_arr:
                _advance(tr, istate, fstate, occ)
                counted = pend_c[ir]
                service = pend_s[ir]
                pend_t[ir] = pend_t[n - 1]
                pend_s[ir] = pend_s[n - 1]
                pend_c[ir] = pend_c[n - 1]
                istate[_PENDING] = n - 1
                istate[_COUNTED_PENDING] -= counted
                if busy < K:
                    completions[busy] = tr + service
                    istate[_BUSY] = busy + 1
                elif counted == 1:
                    counters[_DROP_REARRIVAL] += 1
                if n == 1 and istate[_MEASURING] == 1:
                    counters[_PHASE_ENDS] += 1
                    phase_hist[istate[_BUSY]] += 1
            elif tc < t_arr:
                _advance(tc, istate, fstate, occ)
                completions[ic] = completions[busy - 1]
                istate[_BUSY] = busy - 1
            else:
                break

        _advance(t_arr, istate, fstate, occ)
        fstate[_ARRIVAL_CLOCK] = t_arr
        if g == warmup:
            istate[_MEASURING] = 1
        counted = 1 if warmup <= g < n_total else 0
        busy = istate[_BUSY]
        if counted == 1:
            counters[_ARRIVALS] += 1
        if busy < K:
            completions[busy] = t_arr + serv[j]
            istate[_BUSY] = busy + 1
        else:
            n = istate[_PENDING]
            r = _rearrival_time(kind, param, t_hat, limit, n, fstate[_LAST_SCHEDULED], t_arr, unif[j])
            if r < 0.0:
                if counted == 1:
                    counters[_DROP_ARRIVAL] += 1
            else:
                if kind == 3 and r - t_arr > t_hat * (1.0 + 1e-12):
                    raise AssertionError("DSRT deferral exceeds the deferral-time bound")
                pend_t[n] = r
                pend_s[n] = serv[j]
                pend_c[n] = counted
                istate[_PENDING] = n + 1
                istate[_COUNTED_PENDING] += counted
                fstate[_LAST_SCHEDULED] = r
                if counted == 1:
                    counters[_DEFERRALS] += 1
        if g == n_total - 1:
            istate[_MEASURING] = 0
        istate[_NEXT_ARRIVAL] = g + 1
    return istate[_NEXT_ARRIVAL] >= n_total and istate[_COUNTED_PENDING] == 0


@dataclass
class SimState:
    """Snapshot of the simulated system: busy servers, pending rearrivals, clock."""

    busy: int
    rearrival_calendar: list[float] = field(default_factory=list)
    clock: float = 0.0

    @property
    def deferred(self) -> int:
        return len(self.rearrival_calendar)

    @property
    def time_to_next_rearrival(self) -> float:
        if not self.rearrival_calendar:
            return math.inf
        return min(self.rearrival_calendar) - self.clock


def deferral_decision(p: SystemParams, policy: PolicySpec, state: SimState, now: float,
                      rng: np.random.Generator | None = None) -> float | None:
    """Rearrival time assigned to a customer who finds every server busy, or None to drop."""
    if state.busy < p.num_servers:
        raise ValueError("work conservation: a free server is available, the customer must be served")
    calendar = state.rearrival_calendar
    u = 0.0
    if policy.kind in (PolicyKind.UNIFORM_RANDOM, PolicyKind.ESRT):
        if rng is None:
            raise ValueError(f"{policy.kind.value} needs a random generator")
        u = float(rng.random())
    last = max(calendar) if calendar else now
    r = _rearrival_time(_KIND_CODE[policy.kind], float(policy.parameter or 0.0),
                        float(p.deferral_time_bound), effective_deferral_limit(p, policy),
                        len(calendar), last, float(now), u)
    return None if r < 0 else r


@dataclass(frozen=True)
class SimEstimate:
    blocking_estimate: float
    ci_halfwidth_95: float
    arrivals: int
    deferrals: int
    dropped_on_arrival: int
    dropped_on_rearrival: int
    seed: int
    replications: int
    replicate_estimates: tuple[float, ...] = ()
    time_fractions: np.ndarray | None = field(default=None, compare=False, repr=False)
    phase_end_counts: np.ndarray | None = field(default=None, compare=False, repr=False)

    @property
    def dropped(self) -> int:
        return self.dropped_on_arrival + self.dropped_on_rearrival

    def ci_halfwidth(self, confidence: float = 0.95) -> float:
        """Half-width of a two-sided interval at ``confidence``.

        Uses the across-replication spread (Student t) with 10 or more
        replications, otherwise a binomial interval on the pooled counts.
        """
        q = 0.5 + confidence / 2
        r = len(self.replicate_estimates)
        if r >= 10:
            sd = float(np.std(self.replicate_estimates, ddof=1))
            return float(stats.t.ppf(q, r - 1) * sd / math.sqrt(r))
        if self.arrivals == 0:
            return math.inf
        b = self.blocking_estimate
        return float(stats.norm.ppf(q) * math.sqrt(max(b * (1 - b), 0.0) / self.arrivals))


def replication_rng(seed: int, replication: int = 0) -> np.random.Generator:
    """PCG64 stream for one replication, keyed by ``(seed, replication)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(replication,))))


def run_replication(p: SystemParams, policy: PolicySpec, num_arrivals: int,
                    warmup_arrivals: int | None = None, seed: int = 0, *,
                    replication: int = 0, record: bool = False) -> SimEstimate:
    """Simulate ``num_arrivals`` exogenous arrivals and count blocked customers.

    Customers arriving before ``warmup_arrivals`` (default 10% of the run)
    are simulated but not counted. A counted customer who is deferred is
    followed until their rearrival, so each customer is counted exactly once.
    With ``record=True`` the estimate also carries the time fractions over
    ``(k, d)`` and a histogram of busy servers at the end of each deferral phase.
    """
    if warmup_arrivals is None:
        warmup_arrivals = num_arrivals // 10
    if num_arrivals <= 0 or not 0 <= warmup_arrivals < num_arrivals:
        raise InvalidHorizon(f"need num_arrivals > warmup_arrivals >= 0, got {num_arrivals}, {warmup_arrivals}")
    K = p.num_servers
    kind = _KIND_CODE[policy.kind]
    limit = effective_deferral_limit(p, policy)
    cap = max(limit, 1)
    rng = replication_rng(seed, replication)

    istate = np.zeros(5, dtype=np.int64)
    fstate = np.zeros(3)
    completions = np.empty(K)
    pend_t = np.empty(cap)
    pend_s = np.empty(cap)
    pend_c = np.zeros(cap, dtype=np.int64)
    counters = np.zeros(5, dtype=np.int64)
    occ = np.zeros((K + 1, cap + 1))
    phase_hist = np.zeros(K + 1, dtype=np.int64)
    mean_inter = 1.0 / p.arrival_rate
    mean_serv = 1.0 / p.service_rate
    param = float(policy.parameter or 0.0)

    done = False
    while not done:
        inter = rng.exponential(mean_inter, CHUNK)
        serv = rng.exponential(mean_serv, CHUNK)
        unif = rng.random(CHUNK)
        done = _run_chunk(kind, param, float(p.deferral_time_bound), limit, K, inter, serv, unif,
                          num_arrivals, warmup_arrivals, istate, fstate, completions,
                          pend_t, pend_s, pend_c, counters, occ, phase_hist)

    arrivals = int(counters[_ARRIVALS])
    dropped = int(counters[_DROP_ARRIVAL] + counters[_DROP_REARRIVAL])
    est = dropped / arrivals
    fractions = occ[:, : limit + 1] / occ.sum() if record else None
    return SimEstimate(
        blocking_estimate=est,
        ci_halfwidth_95=1.96 * math.sqrt(est * (1 - est) / arrivals),
        arrivals=arrivals,
        deferrals=int(counters[_DEFERRALS]),
        dropped_on_arrival=int(counters[_DROP_ARRIVAL]),
        dropped_on_rearrival=int(counters[_DROP_REARRIVAL]),
        seed=seed,
        replications=1,
        replicate_estimates=(est,),
        time_fractions=fractions,
        phase_end_counts=phase_hist.copy() if record else None,
    )


def estimate_blocking(p: SystemParams, policy: PolicySpec, num_arrivals: int,
                      replications: int = 1, base_seed: int = 0,
                      warmup_arrivals: int | None = None) -> SimEstimate:
    """Pool independent replications of ``num_arrivals`` arrivals each."""
    if replications < 1:
        raise InvalidHorizon("replications must be at least 1")
    if replications == 1:
        return run_replication(p, policy, num_arrivals, warmup_arrivals, base_seed)
    runs = [run_replication(p, policy, num_arrivals, warmup_arrivals, base_seed, replication=i)
            for i in range(replications)]
    arrivals = sum(r.arrivals for r in runs)
    dropped = sum(r.dropped for r in runs)
    est = SimEstimate(
        blocking_estimate=dropped / arrivals,
        ci_halfwidth_95=0.0,
        arrivals=arrivals,
        deferrals=sum(r.deferrals for r in runs),
        dropped_on_arrival=sum(r.dropped_on_arrival for r in runs),
        dropped_on_rearrival=sum(r.dropped_on_rearrival for r in runs),
        seed=base_seed,
        replications=replications,
        replicate_estimates=tuple(r.blocking_estimate for r in runs) if replications >= 10 else (),
    )
    return replace(est, ci_halfwidth_95=est.ci_halfwidth(0.95))
