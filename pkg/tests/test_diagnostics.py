import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedapm_lab.datagen import make_quadratic_problem
from fedapm_lab.diagnostics import (Snapshot, consensus_loss, descent_check, descent_constant,
                                    dist_sq, drift_metric, dual_bound_check, lagrangian,
                                    lower_bound_check, lyapunov_value, rate_fit,
                                    relative_error_check, relerr_constant, snapshot,
                                    stationarity_residuals, step_sum, traced_run)
from fedapm_lab.engine import init_federation
from fedapm_lab.errors import ContractViolation
from fedapm_lab.numcore import QuadraticObjective


def make_snap(objs, V, U, Pi, u, xi=None, mu=0.5, sigma=1.0, rho=1.0):
    m = len(objs)
    return Snapshot(tuple(np.asarray(x, float) for x in V), tuple(np.asarray(x, float) for x in U),
                    tuple(np.asarray(x, float) for x in Pi), np.asarray(u, float),
                    np.zeros(m) if xi is None else np.asarray(xi, float),
                    np.full(m, mu), np.full(m, sigma), np.array([o.alpha for o in objs]), rho)


def stationary_snap(objs, sol, rho=1.0):
    Pi = [-o.alpha * o.loss_and_grads(v, sol.u)[2] for o, v in zip(objs, sol.V)]
    return make_snap(objs, sol.V, [sol.u] * len(objs), Pi, sol.u, rho=rho)


@pytest.fixture
def quad():
    return make_quadratic_problem(5, 4, 2, seed=11)


# --- point quantities ------------------------------------------------------------

def test_lyapunov_in_consensus_is_the_loss(quad):
    objs, _ = quad
    rng = np.random.default_rng(0)
    V = [rng.standard_normal(2) for _ in objs]
    u = rng.standard_normal(4)
    snap = make_snap(objs, V, [u] * 5, [np.zeros(4)] * 5, u)
    total = sum(o.alpha * o.loss(v, u) for o, v in zip(objs, V))
    assert lyapunov_value(snap, objs) == pytest.approx(total, rel=1e-14)
    assert consensus_loss(snap, objs) == pytest.approx(total, rel=1e-14)


def test_lyapunov_accuracy_weights_cancel(quad):
    objs, _ = quad
    rho, mu = 0.7, np.array([0.1, 0.5, 0.9, 0.3, 0.6])
    rng = np.random.default_rng(1)
    snap = make_snap(objs, [rng.standard_normal(2) for _ in objs],
                     [rng.standard_normal(4) for _ in objs],
                     [rng.standard_normal(4) for _ in objs], rng.standard_normal(4), rho=rho)
    snap = snap._replace(mu=mu, xi=rho * (1 - mu) / 29)
    assert lyapunov_value(snap, objs) == pytest.approx(lagrangian(snap, objs) + 5, rel=1e-13)


def test_lyapunov_rejects_unit_mu(quad):
    objs, sol = quad
    snap = stationary_snap(objs, sol)._replace(mu=np.ones(5))
    with pytest.raises(ContractViolation):
        lyapunov_value(snap, objs)


def test_constants_by_direct_arithmetic():
    rho, sigma, mu = Fraction(6, 100), Fraction(4, 100), Fraction(1, 2)
    b = max(Fraction(22, 5) * sigma ** 2 + Fraction(4, 3) * rho ** 2 + 8 * rho / 15,
            Fraction(16, 3) * rho ** 2 + 2 + 8 * rho / 15,
            (48 + 4 * rho) / (rho * (1 - mu)))
    a = min(rho / 60, sigma / 2 - 4 * rho / 15)
    assert b == 1608 and a == Fraction(1, 1000)
    assert relerr_constant(0.06, [0.04], [0.5]) == pytest.approx(1608, rel=1e-14)
    assert descent_constant(0.06, [0.04]) == pytest.approx(0.001, rel=1e-12)


def test_residuals_vanish_at_the_stationary_point(quad):
    objs, sol = quad
    snap = stationary_snap(objs, sol)
    r = stationarity_residuals(snap, objs)
    assert max(r) <= 1e-10
    assert dist_sq(snap, objs) <= 1e-20


def test_residuals_at_a_consensus_start(quad):
    objs, _ = quad
    u = np.ones(4)
    snap = make_snap(objs, [np.zeros(2)] * 5, [u] * 5, [np.zeros(4)] * 5, u)
    r = stationarity_residuals(snap, objs)
    assert r.r3 == 0.0 and r.r4 == 0.0
    assert r.r1 > 0 and r.r2 > 0


def test_residual_dimension_mismatch(quad):
    objs, sol = quad
    snap = stationary_snap(objs, sol)
    snap = snap._replace(Pi=(np.zeros(3),) + snap.Pi[1:])
    with pytest.raises(ContractViolation):
        stationarity_residuals(snap, objs)


def test_drift_examples():
    assert drift_metric([np.ones(3)] * 4, np.ones(3)) == 0.0
    assert drift_metric([np.array([1.0, 0.0]), np.array([-1.0, 0.0])], np.zeros(2)) == 1.0
    with pytest.raises(ContractViolation):
        drift_metric([], np.zeros(2))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(-100, 100), min_size=3, max_size=3), min_size=1, max_size=8))
def test_drift_is_nonnegative_and_translation_invariant(U):
    U = [np.array(x) for x in U]
    u = np.mean(U, axis=0)
    shift = np.array([3.0, -1.0, 2.0])
    d = drift_metric(U, u)
    assert d >= 0
    assert drift_metric([x + shift for x in U], u + shift) == pytest.approx(d, rel=1e-9, abs=1e-9)


# --- checks -------------------------------------------------------------------------

def test_descent_between_identical_states(quad):
    objs, sol = quad
    snap = stationary_snap(objs, sol)._replace(xi=np.full(5, 0.1))
    nxt = snap._replace(xi=np.full(5, 0.05))
    sp = step_sum(snap, nxt)
    assert sp == 0.0
    chk = descent_check(lyapunov_value(snap, objs), lyapunov_value(nxt, objs), sp, 0.01)
    assert chk.ok and chk.lhs >= 0


def test_relative_error_at_an_exact_stationary_point():
    c = np.array([1.0, -2.0])
    objs = [QuadraticObjective(np.eye(2), np.zeros((2, 0)), c)]
    snap = make_snap(objs, [np.zeros(0)], [c], [np.zeros(2)], c)
    chk = relative_error_check(dist_sq(snap, objs), 0.0, 0.0, 1608.0)
    assert chk.lhs == 0.0 and chk.ok


def test_relative_error_failure_is_reported():
    assert not relative_error_check(1.0, 1e-3, 0.0, 10.0).ok


def test_dual_bound_for_frozen_and_dual_free_clients(quad):
    objs, sol = quad
    snap = stationary_snap(objs, sol)._replace(xi=np.full(5, 0.2))
    # client 0 frozen; the others only lower xi
    nxt = snap._replace(xi=np.array([0.2, 0.1, 0.1, 0.1, 0.1]))
    checks = dual_bound_check(snap, nxt)
    assert checks[0].lhs == 0.0 and checks[0].rhs == 0.0 and checks[0].ok
    assert all(c.ok for c in checks)


def test_lower_bound_check():
    assert lower_bound_check(5.0, 0.01, 1.0, 4.0).ok
    assert not lower_bound_check(5.0, 1.0, 1.0, 4.0).ok


# --- rate fitting -------------------------------------------------------------------------

def test_geometric_gaps_are_linear():
    fit = rate_fit(3 * 0.9 ** np.arange(1, 61))
    assert fit.regime == "linear"
    assert fit.slope == pytest.approx(math.log(0.9), rel=1e-10)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-12)


def test_constant_gaps_are_inconclusive():
    fit = rate_fit(np.full(40, 0.5))
    assert fit.regime == "inconclusive" and abs(fit.slope) < 1e-12


def test_power_law_gaps_are_sublinear():
    t = np.arange(1, 201, dtype=float)
    assert rate_fit(1.0 / t).regime == "sublinear"


def test_nonpositive_gaps_are_inconclusive():
    fit = rate_fit(np.r_[np.ones(30), -1.0])
    assert fit.regime == "inconclusive" and fit.reason


def test_gaps_at_the_floor_are_finite():
    assert rate_fit(np.r_[np.ones(10), np.full(30, 1e-15)]).regime == "finite"


def test_rate_fit_needs_enough_points():
    with pytest.raises(ContractViolation):
        rate_fit(np.ones(5))


# --- traced runs ------------------------------------------------------------------------------

def test_traced_quadratic_run_passes_every_check():
    objs, sol = make_quadratic_problem(4, 3, 2, seed=5)
    state = init_federation(objs, seed=5)
    final, trace = traced_run(state, objs, 80)
    assert trace.applicable
    assert all(r.descent.ok and r.relerr.ok and r.lower.ok for r in trace.rows)
    assert all(c.ok for r in trace.rows for c in r.dual)
    assert np.all(np.diff(trace.lyapunov_series) <= 1e-9 * np.maximum(1, np.abs(trace.lyapunov_series[:-1])))
    rates = rate_fit(trace.lyapunov_series[1:61] - trace.lyapunov_series[-1] + 1e-14)
    assert rates.regime == "linear"


def test_trace_row_matches_recomputation():
    objs, _ = make_quadratic_problem(3, 3, 1, seed=1)
    state = init_federation(objs, seed=1)
    prev = snapshot(state)
    state2, trace = traced_run(state, objs, 1)
    cur = snapshot(state2)
    row = trace.rows[0]
    assert row.sigma_p == step_sum(prev, cur)
    assert row.lyapunov == lyapunov_value(cur, objs)
    assert row.train_loss == consensus_loss(cur, objs)
    assert row.drift == drift_metric(cur.U, cur.u)


def test_partial_participation_trace_is_flagged():
    objs, _ = make_quadratic_problem(10, 3, 1, seed=1)
    _, trace = traced_run(init_federation(objs, fraction=0.3), objs, 3)
    assert not any(r.full_participation for r in trace.rows)
    assert all(r.descent.ok for r in trace.rows)
