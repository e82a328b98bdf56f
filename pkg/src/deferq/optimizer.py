"""One-dimensional minimization of blocking probability over the policy parameter.

Both policies are searched over the rearrival spacing ``s`` (``x`` for DSRT,
``1 / alpha`` for ESRT). The deferral limit ``min(D_hat, floor(T_hat / s))``
jumps at ``s = T_hat / j``, so the objective is only piecewise smooth: a
geometric grid is merged with those breakpoints, and golden-section search
refines around the best grid point without crossing a breakpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import dsrt, esrt
from .model import InvalidParameter, PolicyKind, PolicySpec, SystemParams
from .simulator import estimate_blocking

INV_PHI = (math.sqrt(5) - 1) / 2


class EmptyBounds(InvalidParameter):
    def __init__(self, reason: str):
        super().__init__("bounds", reason)


@dataclass(frozen=True)
class OptimizationResult:
    kind: PolicyKind
    best_parameter: float
    best_blocking: float
    evaluations: int
    trace: tuple[tuple[float, float], ...]

    @property
    def best_spacing(self) -> float:
        """Spacing between rearrivals, ``x`` for DSRT and ``1 / alpha`` for ESRT."""
        if self.kind is PolicyKind.ESRT:
            return 1.0 / self.best_parameter
        return self.best_parameter


def default_spacing_bounds(p: SystemParams, kind: PolicyKind) -> tuple[float, float]:
    kind = PolicyKind.parse(kind)
    if kind is PolicyKind.DSRT and p.num_servers == 1 and p.deferral_count_bound == 1:
        lo, hi = dsrt.optimal_x_bracket(p.arrival_rate, p.service_rate)
        return lo, min(hi, p.deferral_time_bound)
    return 1e-3 / p.arrival_rate, p.deferral_time_bound


def analytic_objective(p: SystemParams, kind: PolicyKind) -> Callable[[float], float]:
    """Blocking probability as a function of the spacing."""
    kind = PolicyKind.parse(kind)
    if kind is PolicyKind.DSRT:
        return lambda s: dsrt.blocking_general(p, s).total
    if kind is PolicyKind.ESRT:
        return lambda s: esrt.blocking(p, 1.0 / s).total
    raise InvalidParameter("kind", "only DSRT and ESRT have a tunable parameter")


def simulated_objective(p: SystemParams, kind: PolicyKind, num_arrivals: int = 100_000,
                        replications: int = 1, seed: int = 0) -> Callable[[float], float]:
    """Simulated blocking as a function of the spacing, with common random numbers."""
    kind = PolicyKind.parse(kind)

    def f(s: float) -> float:
        param = s if kind is PolicyKind.DSRT else 1.0 / s
        return estimate_blocking(p, PolicySpec(kind, param), num_arrivals, replications, seed).blocking_estimate

    return f


def _golden(f, a: float, b: float, tol: float):
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol * 0.5 * (a + b):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = f(d)


def minimize_blocking(p: SystemParams, kind, objective: str = "analytic",
                      bounds: tuple[float, float] | None = None, tol: float = 1e-4,
                      grid_points: int = 64, num_arrivals: int = 100_000,
                      replications: int = 1, seed: int = 0) -> OptimizationResult:
    """Find the DSRT spacing or ESRT rate with the smallest blocking probability.

    ``bounds`` are given on the spacing (``x`` or ``1 / alpha``). Evaluations
    are memoized; ties go to the smaller spacing.
    """
    kind = PolicyKind.parse(kind)
    if bounds is None:
        bounds = default_spacing_bounds(p, kind)
    lo, hi = float(bounds[0]), float(bounds[1])
    if not (0 < lo <= hi) or not math.isfinite(hi):
        raise EmptyBounds(f"need 0 < low <= high, got ({lo}, {hi})")
    if objective == "analytic":
        raw = analytic_objective(p, kind)
    elif objective == "simulated":
        raw = simulated_objective(p, kind, num_arrivals, replications, seed)
    else:
        raise InvalidParameter("objective", f"unknown objective {objective!r}")

    memo: dict[float, float] = {}

    def f(s: float) -> float:
        s = float(s)
        if s not in memo:
            memo[s] = float(raw(s))
        return memo[s]

    t_hat = p.deferral_time_bound
    breaks = [t_hat / j for j in range(1, p.deferral_count_bound + 1) if lo <= t_hat / j <= hi]
    grid = np.geomspace(lo, hi, grid_points) if hi > lo else np.array([lo])
    points = np.unique(np.concatenate([grid, breaks, [lo, hi]]))
    for s in points:
        f(s)

    values = np.array([memo[s] for s in points])
    i = int(np.argmin(values))
    # refine on each side of the incumbent, never across a breakpoint
    cuts = sorted(set(breaks))
    for a, b in ((points[max(i - 1, 0)], points[i]), (points[i], points[min(i + 1, len(points) - 1)])):
        if b <= a:
            continue
        inner = [a] + [c for c in cuts if a < c < b] + [b]
        for left, right in zip(inner, inner[1:]):
            _golden(f, left, right, tol)

    best_s = min(memo, key=lambda s: (memo[s], s))
    to_param = (lambda s: s) if kind is PolicyKind.DSRT else (lambda s: 1.0 / s)
    trace = tuple((to_param(s), memo[s]) for s in sorted(memo))
    return OptimizationResult(kind=kind, best_parameter=to_param(best_s), best_blocking=memo[best_s],
                              evaluations=len(memo), trace=trace)
