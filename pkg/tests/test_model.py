import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from deferq.model import (BlockingReport, InvalidParameter, NumericalError, PolicyKind, PolicySpec,
                          SystemParams, effective_deferral_limit, erlang_b_blocking, erlang_b_report)


def erlang_b_direct(K, rho):
    rho = Fraction(rho)
    terms = [rho ** k / math.factorial(k) for k in range(K + 1)]
    return terms[-1] / sum(terms)


def test_erlang_b_single_server_unit_load():
    assert erlang_b_blocking(1, 1.0) == 0.5


@pytest.mark.parametrize("K", [1, 2, 5, 10, 30])
@pytest.mark.parametrize("rho", [0.25, 1.0, 3.5, 12.0])
def test_erlang_b_matches_direct_sum(K, rho):
    assert erlang_b_blocking(K, rho) == pytest.approx(float(erlang_b_direct(K, rho)), rel=1e-12)


def test_erlang_b_large_system_is_finite():
    b = erlang_b_blocking(5000, 5000.0)
    assert 0 < b < 0.02


@given(st.integers(1, 60), st.floats(0.01, 100.0))
def test_erlang_b_monotone(K, rho):
    b = erlang_b_blocking(K, rho)
    assert 0 < b < 1
    assert erlang_b_blocking(K + 1, rho) < b
    assert erlang_b_blocking(K, rho * 1.1) > b


def test_erlang_b_report_is_truncated_poisson():
    p = SystemParams(3, 2.0, 1.0, 5.0, 2)
    rep = erlang_b_report(p)
    w = np.array([2.0 ** k / math.factorial(k) for k in range(4)])
    np.testing.assert_allclose(rep.table[:, 0], w / w.sum(), rtol=1e-14)
    assert rep.total == pytest.approx(erlang_b_blocking(3, 2.0))
    assert rep.rearrival_blocked == 0.0
    assert rep.deferral_limit == 0


def test_rho_is_derived():
    p = SystemParams(2, 3.0, 2.0, 1.0, 1)
    assert p.rho == 1.5
    with pytest.raises(TypeError):
        SystemParams(2, 3.0, 2.0, 1.0, 1, rho=4.0)


@pytest.mark.parametrize("field, args", [
    ("num_servers", (0, 1.0, 1.0, 1.0, 1)),
    ("arrival_rate", (1, -1.0, 1.0, 1.0, 1)),
    ("service_rate", (1, 1.0, 0.0, 1.0, 1)),
    ("deferral_time_bound", (1, 1.0, 1.0, -2.0, 1)),
    ("deferral_count_bound", (1, 1.0, 1.0, 1.0, -1)),
    ("arrival_rate", (1, float("nan"), 1.0, 1.0, 1)),
])
def test_invalid_params_name_the_field(field, args):
    with pytest.raises(InvalidParameter) as info:
        SystemParams(*args)
    assert info.value.name == field


def test_policy_parsing():
    assert PolicyKind.parse("DSRT") is PolicyKind.DSRT
    assert PolicyKind.parse("erlang-b") is PolicyKind.NO_DEFERRAL
    assert PolicyKind.parse("uniform_random") is PolicyKind.UNIFORM_RANDOM
    with pytest.raises(InvalidParameter):
        PolicyKind.parse("lifo")


def test_parametric_policies_need_a_positive_parameter():
    with pytest.raises(InvalidParameter):
        PolicySpec(PolicyKind.DSRT)
    with pytest.raises(InvalidParameter):
        PolicySpec.esrt(0.0)
    assert PolicySpec.dsrt(0.5).parameter == 0.5


def test_effective_limits():
    p = SystemParams(2, 1.0, 1.0, 10.0, 3)
    assert effective_deferral_limit(p, PolicySpec.dsrt(4.0)) == 2
    assert effective_deferral_limit(p, PolicySpec.dsrt(1.0)) == 3
    assert effective_deferral_limit(p, PolicySpec.dsrt(11.0)) == 0
    assert effective_deferral_limit(p, PolicySpec.esrt(0.25)) == 2
    assert effective_deferral_limit(p, PolicySpec(PolicyKind.FIXED_MAX)) == 3
    assert effective_deferral_limit(p, PolicySpec(PolicyKind.NO_DEFERRAL)) == 0


@given(st.floats(0.01, 50.0), st.floats(1e-3, 60.0), st.integers(0, 20))
def test_dsrt_limit_respects_both_bounds(t_hat, x, d_hat):
    p = SystemParams(1, 1.0, 1.0, t_hat, d_hat)
    D = effective_deferral_limit(p, PolicySpec.dsrt(x))
    assert 0 <= D <= d_hat
    assert D * x <= t_hat
    assert D == d_hat or (D + 1) * x > t_hat


def test_report_components_must_add_up():
    with pytest.raises(NumericalError):
        BlockingReport(total=0.5, arrival_blocked=0.2, rearrival_blocked=0.2,
                       table=np.ones((2, 1)) / 2, deferral_limit=1)
