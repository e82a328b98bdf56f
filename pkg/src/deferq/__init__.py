"""Blocking probabilities of loss systems whose blocked customers may defer and retry."""

from .model import (BlockingReport, DeferqError, InvalidParameter, NumericalError, PolicyKind,
                    PolicySpec, SystemParams, effective_deferral_limit, erlang_b_blocking,
                    erlang_b_report, validate_params)
from .dsrt import blocking_general as dsrt_blocking, blocking_single_closed_form as dsrt_single_closed_form
from .esrt import blocking as esrt_blocking, blocking_single_server_closed_form as esrt_single_closed_form
from .simulator import SimEstimate, estimate_blocking, run_replication
from .optimizer import OptimizationResult, minimize_blocking
from .experiments import ResultRow, SweepSpec, run_halfin_whitt_sweep

__all__ = [
    "BlockingReport", "DeferqError", "InvalidParameter", "NumericalError", "PolicyKind", "PolicySpec",
    "SystemParams", "effective_deferral_limit", "erlang_b_blocking", "erlang_b_report", "validate_params",
    "dsrt_blocking", "dsrt_single_closed_form", "esrt_blocking", "esrt_single_closed_form",
    "SimEstimate", "estimate_blocking", "run_replication", "OptimizationResult", "minimize_blocking",
    "ResultRow", "SweepSpec", "run_halfin_whitt_sweep",
]
