"""Halfin-Whitt sweeps and the CSV rows they produce."""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from . import dsrt, esrt
from .model import DeferqError, PolicyKind, PolicySpec, SystemParams, erlang_b_blocking
from .optimizer import minimize_blocking
from .simulator import estimate_blocking

POLICY_ORDER = (PolicyKind.NO_DEFERRAL, PolicyKind.FIXED_MAX, PolicyKind.UNIFORM_RANDOM,
                PolicyKind.DSRT, PolicyKind.ESRT)
CSV_FIELDS = ("policy", "K", "lambda", "parameter", "blocking", "ci_halfwidth", "method", "seed")


def halfin_whitt_rate(K: int, beta: float) -> float:
    return K + beta * math.sqrt(K)


@dataclass(frozen=True)
class ResultRow:
    policy: PolicyKind
    K: int
    lam: float
    parameter: float | None
    blocking: float
    ci_halfwidth: float | None
    method: str
    seed: int | None

    def __post_init__(self):
        object.__setattr__(self, "policy", PolicyKind.parse(self.policy))
        if not 0.0 <= self.blocking <= 1.0:
            raise ValueError(f"blocking {self.blocking} outside [0, 1]")


@dataclass(frozen=True)
class SweepSpec:
    beta: float
    k_values: tuple[int, ...]
    t_hat: float
    d_hat: int
    policies: tuple[PolicyKind, ...] = POLICY_ORDER
    objective: str = "analytic"
    arrivals: int = 10_000
    replications: int = 10
    base_seed: int = 0
    warmup: int | None = None
    service_rate: float = 1.0
    tol: float = 1e-4

    def __post_init__(self):
        ks = tuple(int(k) for k in self.k_values)
        if not ks or list(ks) != sorted(set(ks)) or ks[0] < 1:
            raise ValueError("k_values must be non-empty, ascending and positive")
        for k in ks:
            if halfin_whitt_rate(k, self.beta) <= 0:
                raise ValueError(f"beta={self.beta} gives a non-positive arrival rate at K={k}")
        if self.objective not in ("analytic", "simulated"):
            raise ValueError(f"unknown objective {self.objective!r}")
        object.__setattr__(self, "k_values", ks)
        object.__setattr__(self, "policies", tuple(PolicyKind.parse(k) for k in self.policies))

    def params(self, K: int) -> SystemParams:
        return SystemParams(K, halfin_whitt_rate(K, self.beta), self.service_rate, self.t_hat, self.d_hat)


class SweepFailed(DeferqError):
    def __init__(self, rows: list[ResultRow], cause: BaseException):
        super().__init__(f"sweep failed after {len(rows)} rows: {cause}")
        self.rows = rows
        self.cause = cause


def evaluate_point(spec: SweepSpec, kind: PolicyKind, K: int) -> ResultRow:
    """One ``(policy, K)`` cell of a sweep."""
    p = spec.params(K)
    lam = p.arrival_rate
    if kind is PolicyKind.NO_DEFERRAL:
        return ResultRow(kind, K, lam, None, erlang_b_blocking(K, p.rho), None, "analytic", None)
    if kind in (PolicyKind.FIXED_MAX, PolicyKind.UNIFORM_RANDOM):
        est = estimate_blocking(p, PolicySpec(kind), spec.arrivals, spec.replications, spec.base_seed,
                                spec.warmup)
        return ResultRow(kind, K, lam, None, est.blocking_estimate, est.ci_halfwidth_95, "simulated", spec.base_seed)
    res = minimize_blocking(p, kind, objective=spec.objective, tol=spec.tol,
                            num_arrivals=spec.arrivals, replications=spec.replications, seed=spec.base_seed)
    if spec.objective == "analytic":
        return ResultRow(kind, K, lam, res.best_parameter, res.best_blocking, None, "analytic", None)
    est = estimate_blocking(p, PolicySpec(kind, res.best_parameter), spec.arrivals,
                            spec.replications, spec.base_seed, spec.warmup)
    return ResultRow(kind, K, lam, res.best_parameter, est.blocking_estimate, est.ci_halfwidth_95,
                     "simulated", spec.base_seed)


def worker_count() -> int:
    env = os.environ.get("DEFERQ_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _sort_key(row: ResultRow):
    return POLICY_ORDER.index(row.policy), row.K


def run_halfin_whitt_sweep(spec: SweepSpec) -> list[ResultRow]:
    """Evaluate every policy at every K with ``lam = K + beta sqrt(K)`` and ``mu = 1``.

    An Erlang B row is always included. Rows come back ordered by
    ``(policy, K)``. On failure, :class:`SweepFailed` carries the rows that
    did complete.
    """
    kinds = list(dict.fromkeys((PolicyKind.NO_DEFERRAL,) + spec.policies))
    tasks = [(kind, K) for kind in kinds for K in spec.k_values]
    rows: list[ResultRow] = []
    error = None
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        futures = [pool.submit(evaluate_point, spec, kind, K) for kind, K in tasks]
        for fut in futures:
            try:
                rows.append(fut.result())
            except Exception as exc:  # noqa: BLE001 - reported with the partial rows
                error = error or exc
    rows.sort(key=_sort_key)
    if error is not None:
        raise SweepFailed(rows, error)
    return rows


def _fmt(value, prob: bool = False) -> str:
    if value is None:
        return ""
    if isinstance(value, PolicyKind):
        return value.value
    if isinstance(value, float):
        return f"{value:.12g}" if prob else repr(value)
    return str(value)


def rows_to_csv(rows, fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in rows:
        writer.writerow([_fmt(r.policy), _fmt(r.K), _fmt(r.lam), _fmt(r.parameter),
                         _fmt(r.blocking, prob=True), _fmt(r.ci_halfwidth, prob=True),
                         r.method, _fmt(r.seed)])


def rows_to_csv_text(rows) -> str:
    buf = io.StringIO()
    rows_to_csv(rows, buf)
    return buf.getvalue()


def rows_from_csv(fh) -> list[ResultRow]:
    def opt(s, cast):
        return cast(s) if s != "" else None

    out = []
    for rec in csv.DictReader(fh):
        out.append(ResultRow(
            policy=rec["policy"], K=int(rec["K"]), lam=float(rec["lambda"]),
            parameter=opt(rec["parameter"], float), blocking=float(rec["blocking"]),
            ci_halfwidth=opt(rec["ci_halfwidth"], float), method=rec["method"],
            seed=opt(rec["seed"], int)))
    return out


def solve_row(p: SystemParams, policy: PolicySpec, method: str = "matrix-geometric") -> ResultRow:
    """Analytic single-point row for DSRT, ESRT or Erlang B."""
    if policy.kind is PolicyKind.DSRT:
        b = dsrt.blocking_general(p, policy.parameter).total
    elif policy.kind is PolicyKind.ESRT:
        b = esrt.blocking(p, policy.parameter, method=method).total
    elif policy.kind is PolicyKind.NO_DEFERRAL:
        b = erlang_b_blocking(p.num_servers, p.rho)
    else:
        raise ValueError(f"{policy.kind.value} has no analytic solution; simulate it")
    return ResultRow(policy.kind, p.num_servers, p.arrival_rate, policy.parameter, b, None, "analytic", None)
