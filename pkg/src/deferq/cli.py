"""Command line front end: ``deferq <command> [options]``.

Every option may also come from a JSON file given with ``--config``; keys
are the option names without the leading dashes (``"t-hat"`` or ``"t_hat"``).
Options on the command line win over the file.

Exit status is 0 on success, 2 for usage errors and invalid parameters, and
3 when a numerical routine fails.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .ctmc import NotIrreducible
from .experiments import (ResultRow, SweepFailed, SweepSpec, rows_to_csv, run_halfin_whitt_sweep,
                          solve_row)
from .model import (DeferqError, InvalidParameter, NumericalError, PolicyKind, PolicySpec,
                    SystemParams, erlang_b_blocking)
from .optimizer import minimize_blocking
from .simulator import estimate_blocking

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

DEFAULTS = {
    "mu": 1.0,
    "method": "matrix-geometric",
    "objective": "analytic",
    "arrivals": 10_000,
    "replications": 10,
    "seed": 0,
    "k_min": 1,
    "k_step": 1,
    "policies": "none,fixed-max,uniform,dsrt,esrt",
}


class UsageError(DeferqError):
    pass


def _common(parser: argparse.ArgumentParser, *, system: bool = True) -> None:
    parser.add_argument("--config", help="JSON file with option values")
    parser.add_argument("--out", help="write CSV here instead of standard output")
    if system:
        parser.add_argument("--servers", type=int, help="number of servers K")
        parser.add_argument("--lambda", dest="lam", type=float, help="arrival rate")
        parser.add_argument("--mu", type=float, help="service rate (default 1)")
        parser.add_argument("--t-hat", type=float, help="bound on total deferral time")
        parser.add_argument("--d-hat", type=int, help="bound on the number of deferrals")


def _sim_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--arrivals", type=int, help="arrivals per replication")
    parser.add_argument("--warmup", type=int, help="arrivals discarded per replication (default 10%%)")
    parser.add_argument("--replications", type=int, help="independent replications (default 10)")
    parser.add_argument("--seed", type=int, help="base seed (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deferq", description="Loss systems with deferred customers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("erlang-b", help="Erlang B blocking probability")
    _common(p)
    p.add_argument("--rho", type=float, help="offered load (or give --lambda and --mu)")

    p = sub.add_parser("solve", help="analytic blocking probability of a policy")
    solve = p.add_subparsers(dest="policy", required=True)
    q = solve.add_parser("dsrt", help="deterministically spaced rearrivals")
    _common(q)
    q.add_argument("--x", type=float, help="spacing between rearrivals")
    q = solve.add_parser("esrt", help="exponentially spaced rearrivals")
    _common(q)
    q.add_argument("--alpha", type=float, help="rearrival rate")
    q.add_argument("--method", choices=["matrix-geometric", "full-generator"])

    p = sub.add_parser("simulate", help="simulate one policy")
    _common(p)
    p.add_argument("--policy", help="none, fixed-max, uniform, dsrt or esrt")
    p.add_argument("--x", type=float, help="DSRT spacing")
    p.add_argument("--alpha", type=float, help="ESRT rate")
    _sim_options(p)

    p = sub.add_parser("optimize", help="optimize the DSRT spacing or ESRT rate")
    _common(p)
    p.add_argument("--policy", help="dsrt or esrt")
    p.add_argument("--objective", choices=["analytic", "simulated"])
    _sim_options(p)

    p = sub.add_parser("halfin-whitt", help="sweep K with lambda = K + beta sqrt(K), mu = 1")
    _common(p, system=False)
    p.add_argument("--beta", type=float)
    p.add_argument("--k-min", type=int)
    p.add_argument("--k-max", type=int)
    p.add_argument("--k-step", type=int)
    p.add_argument("--k-list", help="comma separated K values, overrides the range")
    p.add_argument("--t-hat", type=float)
    p.add_argument("--d-hat", type=int)
    p.add_argument("--policies", help="comma separated policies (Erlang B is always included)")
    p.add_argument("--objective", choices=["analytic", "simulated"])
    _sim_options(p)
    return parser


def _merge_config(args: argparse.Namespace) -> argparse.Namespace:
    values = vars(args)
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError("config must be a JSON object")
        for key, value in cfg.items():
            name = key.lstrip("-").replace("-", "_")
            name = "lam" if name == "lambda" else name
            if name not in values or name in ("command", "config"):
                raise UsageError(f"unknown config key {key!r}")
            if name == "k_list" and isinstance(value, list):
                value = ",".join(str(v) for v in value)
            if name == "policies" and isinstance(value, list):
                value = ",".join(value)
            if values[name] is None:
                values[name] = value
    for name, value in DEFAULTS.items():
        if name in values and values[name] is None:
            values[name] = value
    return args


def _need(args, *names):
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        flags = ", ".join("--" + ("lambda" if n == "lam" else n.replace("_", "-")) for n in missing)
        raise UsageError(f"missing required option(s): {flags}")


def _system(args) -> SystemParams:
    _need(args, "servers", "lam", "mu", "t_hat", "d_hat")
    return SystemParams(args.servers, args.lam, args.mu, args.t_hat, args.d_hat)


def _policy(args) -> PolicySpec:
    _need(args, "policy")
    kind = PolicyKind.parse(args.policy)
    if kind is PolicyKind.DSRT:
        _need(args, "x")
        return PolicySpec.dsrt(args.x)
    if kind is PolicyKind.ESRT:
        _need(args, "alpha")
        return PolicySpec.esrt(args.alpha)
    return PolicySpec(kind)


def _emit(rows: list[ResultRow], args) -> None:
    if args.out:
        with open(args.out, "w", newline="") as fh:
            rows_to_csv(rows, fh)
    else:
        rows_to_csv(rows, sys.stdout)


def cmd_erlang_b(args) -> int:
    _need(args, "servers")
    if args.rho is None:
        _need(args, "lam", "mu")
        rho = args.lam / args.mu
    else:
        rho = args.rho
    if args.servers < 1 or not rho > 0:
        raise InvalidParameter("servers/rho", "need servers >= 1 and rho > 0")
    print(f"{erlang_b_blocking(args.servers, rho):.12g}")
    return EXIT_OK


def cmd_solve(args) -> int:
    p = _system(args)
    if args.policy == "dsrt":
        _need(args, "x")
        row = solve_row(p, PolicySpec.dsrt(args.x))
    else:
        _need(args, "alpha")
        row = solve_row(p, PolicySpec.esrt(args.alpha), method=args.method)
    if args.out:
        _emit([row], args)
    print(f"{row.blocking:.6g}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    p = _system(args)
    policy = _policy(args)
    _need(args, "arrivals")
    est = estimate_blocking(p, policy, args.arrivals, args.replications, args.seed, args.warmup)
    row = ResultRow(policy.kind, p.num_servers, p.arrival_rate, policy.parameter,
                    est.blocking_estimate, est.ci_halfwidth_95, "simulated", args.seed)
    _emit([row], args)
    return EXIT_OK


def cmd_optimize(args) -> int:
    p = _system(args)
    _need(args, "policy")
    kind = PolicyKind.parse(args.policy)
    if kind not in (PolicyKind.DSRT, PolicyKind.ESRT):
        raise InvalidParameter("policy", "only dsrt and esrt can be optimized")
    res = minimize_blocking(p, kind, objective=args.objective, num_arrivals=args.arrivals,
                            replications=args.replications, seed=args.seed)
    if args.objective == "analytic":
        row = ResultRow(kind, p.num_servers, p.arrival_rate, res.best_parameter, res.best_blocking,
                        None, "analytic", None)
    else:
        est = estimate_blocking(p, PolicySpec(kind, res.best_parameter), args.arrivals,
                                args.replications, args.seed, args.warmup)
        row = ResultRow(kind, p.num_servers, p.arrival_rate, res.best_parameter,
                        est.blocking_estimate, est.ci_halfwidth_95, "simulated", args.seed)
    _emit([row], args)
    return EXIT_OK


def _k_values(args) -> tuple[int, ...]:
    if args.k_list:
        try:
            return tuple(int(k) for k in str(args.k_list).split(",") if k.strip())
        except ValueError as exc:
            raise UsageError(f"bad --k-list: {exc}") from exc
    _need(args, "k_max")
    return tuple(range(args.k_min, args.k_max + 1, args.k_step))


def cmd_halfin_whitt(args) -> int:
    _need(args, "beta", "t_hat", "d_hat")
    try:
        spec = SweepSpec(beta=args.beta, k_values=_k_values(args), t_hat=args.t_hat, d_hat=args.d_hat,
                         policies=tuple(s for s in args.policies.split(",") if s.strip()),
                         objective=args.objective, arrivals=args.arrivals,
                         replications=args.replications, base_seed=args.seed, warmup=args.warmup)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    try:
        rows = run_halfin_whitt_sweep(spec)
    except SweepFailed as exc:
        _emit(exc.rows, args)
        raise exc.cause
    _emit(rows, args)
    return EXIT_OK


COMMANDS = {
    "erlang-b": cmd_erlang_b,
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "optimize": cmd_optimize,
    "halfin-whitt": cmd_halfin_whitt,
}


def parse_and_dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with status 2 on bad usage
    try:
        _merge_config(args)
        return COMMANDS[args.command](args)
    except (UsageError, InvalidParameter) as exc:
        print(f"deferq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, ArithmeticError, NotIrreducible, np.linalg.LinAlgError) as exc:
        print(f"deferq: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"deferq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main(argv: list[str] | None = None) -> int:
    try:
        return parse_and_dispatch(argv)
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
