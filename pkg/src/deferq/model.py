"""Model instance, deferral policies, and the Erlang B baseline."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np


class DeferqError(Exception):
    """Base class for all errors raised by deferq."""


class InvalidParameter(DeferqError, ValueError):
    def __init__(self, name: str, reason: str):
        super().__init__(f"{name}: {reason}")
        self.name = name
        self.reason = reason


class NumericalError(DeferqError, ArithmeticError):
    """Raised when a numerical routine cannot deliver its accuracy contract."""


class PolicyKind(str, enum.Enum):
    NO_DEFERRAL = "none"
    FIXED_MAX = "fixed-max"
    UNIFORM_RANDOM = "uniform"
    DSRT = "dsrt"
    ESRT = "esrt"

    @classmethod
    def parse(cls, value) -> "PolicyKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"nodeferral": "none", "no-deferral": "none", "erlang-b": "none",
                   "fixedmax": "fixed-max", "fixed": "fixed-max",
                   "uniformrandom": "uniform", "uniform-random": "uniform"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise InvalidParameter("policy", f"unknown policy {value!r}") from None


@dataclass(frozen=True)
class SystemParams:
    """An M/M/K/K loss system that may defer blocked customers.

    ``rho`` is derived from the two rates and cannot be passed in.
    """

    num_servers: int
    arrival_rate: float
    service_rate: float
    deferral_time_bound: float
    deferral_count_bound: int
    rho: float = field(init=False)

    def __post_init__(self):
        validate_params(self)
        object.__setattr__(self, "rho", self.arrival_rate / self.service_rate)


def validate_params(p: SystemParams) -> SystemParams:
    if isinstance(p.num_servers, bool) or int(p.num_servers) != p.num_servers or p.num_servers < 1:
        raise InvalidParameter("num_servers", f"must be a positive integer, got {p.num_servers!r}")
    for name in ("arrival_rate", "service_rate", "deferral_time_bound"):
        value = getattr(p, name)
        if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
            raise InvalidParameter(name, f"must be positive and finite, got {value!r}")
    d_hat = p.deferral_count_bound
    if isinstance(d_hat, bool) or int(d_hat) != d_hat or d_hat < 0:
        raise InvalidParameter("deferral_count_bound", f"must be a non-negative integer, got {d_hat!r}")
    return p


@dataclass(frozen=True)
class PolicySpec:
    """A deferral policy.

    ``parameter`` is the spacing ``x`` for DSRT and the rate ``alpha`` for
    ESRT; the other kinds ignore it.
    """

    kind: PolicyKind
    parameter: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind.parse(self.kind))
        if self.kind in (PolicyKind.DSRT, PolicyKind.ESRT):
            if self.parameter is None or not math.isfinite(self.parameter) or self.parameter <= 0:
                raise InvalidParameter("parameter", f"{self.kind.value} needs a positive parameter")

    @classmethod
    def dsrt(cls, spacing: float) -> "PolicySpec":
        return cls(PolicyKind.DSRT, spacing)

    @classmethod
    def esrt(cls, rate: float) -> "PolicySpec":
        return cls(PolicyKind.ESRT, rate)

    def check_feasible(self, p: SystemParams) -> None:
        """Raise if the parameter violates the deferral-time bound."""
        if self.kind is PolicyKind.DSRT and self.parameter > p.deferral_time_bound:
            raise InvalidParameter("x", f"spacing {self.parameter} exceeds T_hat={p.deferral_time_bound}")
        if self.kind is PolicyKind.ESRT and 1.0 / self.parameter > p.deferral_time_bound:
            raise InvalidParameter("alpha", f"mean spacing 1/{self.parameter} exceeds T_hat={p.deferral_time_bound}")


def effective_deferral_limit(p: SystemParams, policy: PolicySpec) -> int:
    """Maximum number of simultaneously deferred customers under ``policy``."""
    if policy.kind is PolicyKind.NO_DEFERRAL:
        return 0
    if policy.kind is PolicyKind.DSRT:
        return min(p.deferral_count_bound, _floor_ratio(p.deferral_time_bound, policy.parameter))
    if policy.kind is PolicyKind.ESRT:
        return min(p.deferral_count_bound, _floor_ratio(p.deferral_time_bound * policy.parameter, 1.0))
    return p.deferral_count_bound


def _floor_ratio(num: float, den: float) -> int:
    # largest n with n * den <= num in floating point, so D * x <= T_hat holds exactly
    n = math.floor(num / den)
    while (n + 1) * den <= num:
        n += 1
    while n > 0 and n * den > num:
        n -= 1
    return int(n)


def erlang_b_blocking(num_servers: int, rho: float) -> float:
    """Erlang B blocking probability by the recursion B_k = rho B_{k-1} / (k + rho B_{k-1})."""
    if num_servers < 0:
        raise InvalidParameter("num_servers", "must be non-negative")
    if rho < 0:
        raise InvalidParameter("rho", "must be non-negative")
    b = 1.0
    for k in range(1, int(num_servers) + 1):
        b = rho * b / (k + rho * b)
    return b


@dataclass(frozen=True)
class BlockingReport:
    """Long-run blocking probability split by where customers are lost.

    ``table[k, d]`` is the long-run fraction of time with ``k`` busy servers
    and ``d`` deferred customers.
    """

    total: float
    arrival_blocked: float
    rearrival_blocked: float
    table: np.ndarray
    deferral_limit: int
    phase_end_probs: np.ndarray | None = None

    def __post_init__(self):
        if abs(self.total - (self.arrival_blocked + self.rearrival_blocked)) > 1e-10:
            raise NumericalError("blocking components do not add up to the total")


def erlang_b_report(p: SystemParams) -> BlockingReport:
    """Report for a system that never defers (also the D = 0 degenerate case)."""
    K, rho = p.num_servers, p.rho
    # truncated Poisson, built by ratios to avoid factorial overflow
    w = np.ones(K + 1)
    for k in range(1, K + 1):
        w[k] = w[k - 1] * rho / k
        if w[k] > 1e250:
            w[: k + 1] /= w[k]
    table = (w / w.sum()).reshape(K + 1, 1)
    b = erlang_b_blocking(K, rho)
    return BlockingReport(total=b, arrival_blocked=b, rearrival_blocked=0.0,
                          table=table, deferral_limit=0, phase_end_probs=np.zeros(0))
