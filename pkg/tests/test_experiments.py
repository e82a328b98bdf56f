import io
import json
import math
import subprocess
import sys

import pytest
from hypothesis import given, strategies as st

from deferq import cli, experiments
from deferq.experiments import (ResultRow, SweepFailed, SweepSpec, rows_from_csv, rows_to_csv_text,
                                run_halfin_whitt_sweep, worker_count)
from deferq.model import NumericalError, PolicyKind, erlang_b_blocking


def test_sweep_rows_are_ordered_and_include_erlang_b():
    spec = SweepSpec(beta=0.5, k_values=(4, 9), t_hat=5.0, d_hat=1, policies=("esrt", "dsrt"),
                     arrivals=2_000, replications=2)
    rows = run_halfin_whitt_sweep(spec)
    assert [(r.policy, r.K) for r in rows] == [
        (PolicyKind.NO_DEFERRAL, 4), (PolicyKind.NO_DEFERRAL, 9),
        (PolicyKind.DSRT, 4), (PolicyKind.DSRT, 9), (PolicyKind.ESRT, 4), (PolicyKind.ESRT, 9)]
    for r in rows:
        assert r.lam == pytest.approx(r.K + 0.5 * math.sqrt(r.K))
    assert rows[0].blocking == erlang_b_blocking(4, 5.0)


def test_simulated_sweep_records_seed_and_ci():
    spec = SweepSpec(beta=0.0, k_values=(2,), t_hat=3.0, d_hat=1, policies=("uniform", "dsrt"),
                     objective="simulated", arrivals=2_000, replications=2, base_seed=9)
    rows = run_halfin_whitt_sweep(spec)
    sim = [r for r in rows if r.method == "simulated"]
    assert len(sim) == 2
    assert all(r.seed == 9 and r.ci_halfwidth > 0 for r in sim)


def test_sweep_spec_validation():
    with pytest.raises(ValueError):
        SweepSpec(beta=0.1, k_values=(9, 4), t_hat=1.0, d_hat=1)
    with pytest.raises(ValueError):
        SweepSpec(beta=-5.0, k_values=(4,), t_hat=1.0, d_hat=1)
    with pytest.raises(ValueError):
        SweepSpec(beta=0.1, k_values=(4,), t_hat=1.0, d_hat=1, objective="exact")


def test_partial_rows_survive_a_failure(monkeypatch):
    real = experiments.evaluate_point

    def flaky(spec, kind, K):
        if kind is PolicyKind.ESRT and K == 9:
            raise NumericalError("boom")
        return real(spec, kind, K)

    monkeypatch.setattr(experiments, "evaluate_point", flaky)
    spec = SweepSpec(beta=0.1, k_values=(4, 9), t_hat=5.0, d_hat=1, policies=("esrt",))
    with pytest.raises(SweepFailed) as info:
        run_halfin_whitt_sweep(spec)
    assert [(r.policy.value, r.K) for r in info.value.rows] == [("none", 4), ("none", 9), ("esrt", 4)]


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("DEFERQ_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.delenv("DEFERQ_THREADS")
    assert worker_count() >= 1


def _round12(v):
    return None if v is None else float(f"{v:.12g}")


probs = st.floats(0.0, 1.0)
rows = st.builds(
    ResultRow,
    policy=st.sampled_from(list(PolicyKind)),
    K=st.integers(1, 500),
    lam=st.floats(1e-3, 1e3),
    parameter=st.none() | st.floats(1e-4, 1e3),
    blocking=probs,
    ci_halfwidth=st.none() | probs,
    method=st.sampled_from(["analytic", "simulated"]),
    seed=st.none() | st.integers(0, 2 ** 32),
)


@given(st.lists(rows, max_size=6))
def test_csv_round_trip(rs):
    text = rows_to_csv_text(rs)
    back = rows_from_csv(io.StringIO(text))
    expected = [ResultRow(r.policy, r.K, r.lam, r.parameter, _round12(r.blocking), _round12(r.ci_halfwidth),
                          r.method, r.seed) for r in rs]
    assert back == expected
    assert rows_to_csv_text(back) == text


def test_csv_uses_twelve_significant_digits():
    text = rows_to_csv_text([ResultRow("dsrt", 1, 1.0, 1.0, 1 / 3, None, "analytic", None)])
    assert text.splitlines() == ["policy,K,lambda,parameter,blocking,ci_halfwidth,method,seed",
                                 "dsrt,1,1.0,1.0,0.333333333333,,analytic,"]


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_erlang_b(capsys):
    assert run_cli(capsys, "erlang-b", "--servers", "1", "--rho", "1")[:2] == (0, "0.5\n")
    assert run_cli(capsys, "erlang-b", "--servers", "2", "--lambda", "2", "--mu", "1")[1] == "0.4\n"


def test_cli_solve_dsrt(capsys):
    code, out, _ = run_cli(capsys, "solve", "dsrt", "--servers", "1", "--lambda", "1", "--mu", "1",
                           "--t-hat", "10", "--d-hat", "1", "--x", "1")
    assert (code, out) == (0, "0.427945\n")


def test_cli_solve_esrt_methods_agree(capsys):
    base = ["solve", "esrt", "--servers", "2", "--lambda", "2", "--t-hat", "10", "--d-hat", "3", "--alpha", "0.7"]
    a = run_cli(capsys, *base)[1]
    b = run_cli(capsys, *base, "--method", "full-generator")[1]
    assert a == b


def test_cli_simulate_is_reproducible(capsys):
    argv = ["simulate", "--servers", "2", "--lambda", "2", "--t-hat", "5", "--d-hat", "2",
            "--policy", "esrt", "--alpha", "1", "--arrivals", "5000", "--seed", "7"]
    first = run_cli(capsys, *argv)
    second = run_cli(capsys, *argv)
    assert first[0] == 0 and first[1] == second[1]
    (row,) = rows_from_csv(io.StringIO(first[1]))
    assert row.seed == 7 and row.policy is PolicyKind.ESRT


def test_cli_config_file_and_override(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"servers": 1, "lambda": 1, "mu": 1, "t-hat": 10, "d_hat": 1, "x": 0.5}))
    _, from_file, _ = run_cli(capsys, "solve", "dsrt", "--config", str(cfg))
    _, overridden, _ = run_cli(capsys, "solve", "dsrt", "--config", str(cfg), "--x", "1")
    assert overridden == "0.427945\n"
    assert from_file != overridden
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"servers": 1, "colour": "red"}))
    assert run_cli(capsys, "solve", "dsrt", "--config", str(bad))[0] == 2


def test_cli_sweep_writes_csv(tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    code, _, _ = run_cli(capsys, "halfin-whitt", "--beta", "0.1", "--k-min", "2", "--k-max", "4",
                         "--k-step", "2", "--t-hat", "5", "--d-hat", "1", "--policies", "dsrt",
                         "--out", str(out))
    assert code == 0
    rs = rows_from_csv(out.open())
    assert [(r.policy.value, r.K) for r in rs] == [("none", 2), ("none", 4), ("dsrt", 2), ("dsrt", 4)]


def test_cli_optimize(capsys):
    code, out, _ = run_cli(capsys, "optimize", "--servers", "1", "--lambda", "1", "--t-hat", "10",
                           "--d-hat", "1", "--policy", "dsrt")
    (row,) = rows_from_csv(io.StringIO(out))
    assert code == 0 and row.parameter == pytest.approx(0.9685, abs=1e-3)


@pytest.mark.parametrize("argv", [
    ["bogus"],
    ["solve", "dsrt", "--servers", "1"],
    ["solve", "dsrt", "--servers", "1", "--lambda", "-1", "--t-hat", "1", "--d-hat", "1", "--x", "1"],
    ["optimize", "--servers", "1", "--lambda", "1", "--t-hat", "1", "--d-hat", "1", "--policy", "uniform"],
    ["halfin-whitt", "--beta", "0.1", "--k-list", "9,4", "--t-hat", "1", "--d-hat", "1"],
])
def test_cli_usage_errors_exit_2(argv, capsys):
    assert run_cli(capsys, *argv)[0] == 2


def test_cli_numerical_failure_exits_3(monkeypatch, capsys):
    def broken(*args, **kwargs):
        raise NumericalError("singular")

    monkeypatch.setattr(cli, "solve_row", broken)
    code, _, err = run_cli(capsys, "solve", "dsrt", "--servers", "1", "--lambda", "1", "--t-hat", "10",
                           "--d-hat", "1", "--x", "1")
    assert code == 3 and "numerical" in err


def test_sweep_failure_flushes_partial_rows_and_exits_3(monkeypatch, tmp_path, capsys):
    real = experiments.evaluate_point

    def flaky(spec, kind, K):
        if kind is PolicyKind.DSRT:
            raise NumericalError("boom")
        return real(spec, kind, K)

    monkeypatch.setattr(experiments, "evaluate_point", flaky)
    out = tmp_path / "partial.csv"
    code, _, _ = run_cli(capsys, "halfin-whitt", "--beta", "0.1", "--k-list", "4", "--t-hat", "5",
                         "--d-hat", "1", "--policies", "dsrt", "--out", str(out))
    assert code == 3
    assert [r.policy.value for r in rows_from_csv(out.open())] == ["none"]


def test_console_script_runs():
    proc = subprocess.run([sys.executable, "-m", "deferq.cli", "erlang-b", "--servers", "1", "--rho", "1"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and proc.stdout == "0.5\n"


def test_halfin_whitt_rate_at_hundred_servers():
    spec = SweepSpec(beta=0.1, k_values=(100,), t_hat=10.0, d_hat=1, policies=("dsrt",))
    assert all(r.lam == 101.0 for r in run_halfin_whitt_sweep(spec))


def test_erlang_b_only_sweep():
    ks = (1, 2, 5, 10, 50, 200)
    spec = SweepSpec(beta=0.3, k_values=ks, t_hat=1.0, d_hat=1, policies=("none",))
    rows = run_halfin_whitt_sweep(spec)
    assert [r.K for r in rows] == list(ks)
    for r in rows:
        assert abs(r.blocking - erlang_b_blocking(r.K, r.lam)) <= 1e-12


def test_dsrt_beats_state_independent_policies_per_k():
    spec = SweepSpec(beta=0.1, k_values=(4, 9, 16, 25, 36, 49, 64), t_hat=10.0, d_hat=1,
                     policies=("fixed-max", "uniform", "dsrt"), arrivals=100_000, replications=10, base_seed=1)
    rows = run_halfin_whitt_sweep(spec)
    by = {(r.policy, r.K): r for r in rows}
    for K in spec.k_values:
        si = [by[(PolicyKind.FIXED_MAX, K)], by[(PolicyKind.UNIFORM_RANDOM, K)]]
        best_si = min(si, key=lambda r: r.blocking)
        assert by[(PolicyKind.DSRT, K)].blocking < best_si.blocking
        assert best_si.blocking < by[(PolicyKind.NO_DEFERRAL, K)].blocking + 3 * best_si.ci_halfwidth


def test_optimal_esrt_spacing_shrinks_with_k():
    spec = SweepSpec(beta=0.1, k_values=(4, 9, 16, 25, 36, 49, 64), t_hat=10.0, d_hat=2, policies=("esrt",))
    spacing = [1 / r.parameter for r in run_halfin_whitt_sweep(spec) if r.policy is PolicyKind.ESRT]
    assert all(b <= a for a, b in zip(spacing, spacing[1:]))


def test_simulated_row_reproduces_from_its_seed(capsys):
    spec = SweepSpec(beta=0.1, k_values=(4,), t_hat=10.0, d_hat=1, policies=("uniform",),
                     arrivals=3_000, replications=3, base_seed=21)
    row = [r for r in run_halfin_whitt_sweep(spec) if r.method == "simulated"][0]
    code, out, _ = run_cli(capsys, "simulate", "--servers", "4", "--lambda", repr(row.lam), "--t-hat", "10",
                           "--d-hat", "1", "--policy", "uniform", "--arrivals", "3000", "--replications", "3",
                           "--seed", str(row.seed))
    assert rows_from_csv(io.StringIO(out))[0].blocking == float(f"{row.blocking:.12g}")
