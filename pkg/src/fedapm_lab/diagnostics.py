"""Theory quantities of FedAPM, evaluated along a run.

A point ``P^t = (V^t, U^t, Pi^t, u^t)`` pairs the client tuples after round
``t`` with the shared model they will produce, ``u^t = mean(z^t)``.  Trace
row ``t`` records ``P^t`` and the checks on the transition ``t-1 -> t``:

* sufficient descent of the Lyapunov function,
  ``Lt(P^{t-1}) - Lt(P^t) >= a * Sigma_p^t``;
* relative error, ``dist(0, grad Lt(P^{t-1}))^2 <= b (Sigma_p^t + Xi_drop^t)``;
* per-client dual-step bound;
* the lower bound ``Lt(P^t) - 28/rho Xi^t >= f(V^t, u^t)``.

Every check only needs the recorded scalars, so it can be re-run offline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .engine import InnerConfig, aggregate, run_round
from .errors import ContractViolation

#: Relative tolerance shared by the inequality checks.
CHECK_RTOL = 1e-9


class Snapshot(NamedTuple):
    """Frozen copy of the quantities that define ``P^t``."""

    V: tuple
    U: tuple
    Pi: tuple
    u: np.ndarray
    xi: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    alpha: np.ndarray
    rho: float


def snapshot(state):
    cs = state.clients
    return Snapshot(
        V=tuple(c.v.copy() for c in cs), U=tuple(c.u.copy() for c in cs),
        Pi=tuple(c.pi.copy() for c in cs), u=aggregate([c.z for c in cs]),
        xi=np.array([c.xi for c in cs]), mu=np.array([c.mu for c in cs]),
        sigma=np.array([c.sigma for c in cs]), alpha=np.array([c.alpha for c in cs]),
        rho=float(state.rho))


# --- scalar functions of one point ------------------------------------------

def local_losses(snap, objectives):
    """``f_i(v_i, u_i)`` for every client (unweighted)."""
    return np.array([o.loss(v, u) for o, v, u in zip(objectives, snap.V, snap.U)])


def lagrangian(snap, objectives, losses=None):
    """``sum_i alpha_i f_i + <pi_i, u_i - u> + rho/2 ||u_i - u||^2``."""
    if losses is None:
        losses = local_losses(snap, objectives)
    total = 0.0
    for i in range(len(snap.U)):
        d = snap.U[i] - snap.u
        total += snap.alpha[i] * losses[i] + float(snap.Pi[i] @ d) + 0.5 * snap.rho * float(d @ d)
    return total


def xi_weights(mu, rho):
    mu = np.asarray(mu, dtype=np.float64)
    if not rho > 0:
        raise ContractViolation("rho must be positive")
    if np.any(mu >= 1) or np.any(mu < 0):
        raise ContractViolation("mu must lie in [0, 1)")
    return 29.0 / (rho * (1.0 - mu))


def lyapunov_value(snap, objectives=None, lagrangian_value=None):
    """``L(P) + sum_i 29 / (rho (1 - mu_i)) xi_i``.

    Pass ``lagrangian_value`` to skip re-evaluating the Lagrangian.
    """
    if lagrangian_value is None:
        lagrangian_value = lagrangian(snap, objectives)
    return float(lagrangian_value + xi_weights(snap.mu, snap.rho) @ snap.xi)


def consensus_loss(snap, objectives):
    """``f(V, u) = sum_i alpha_i f_i(v_i, u)``, the training loss."""
    return float(sum(a * o.loss(v, snap.u)
                     for a, o, v in zip(snap.alpha, objectives, snap.V)))


def descent_constant(rho, sigmas):
    return min(rho / 60.0, float(np.min(sigmas)) / 2.0 - 4.0 * rho / 15.0)


def relerr_constant(rho, sigmas, mus):
    sigmas, mus = np.asarray(sigmas, dtype=np.float64), np.asarray(mus, dtype=np.float64)
    t1 = 22.0 / 5.0 * sigmas ** 2 + 4.0 / 3.0 * rho ** 2 + 8.0 * rho / 15.0
    t2 = 16.0 / 3.0 * rho ** 2 + 2.0 + 8.0 * rho / 15.0
    t3 = (48.0 + 4.0 * rho) / (rho * (1.0 - mus))
    return float(max(t1.max(), t2, t3.max()))


class Residuals(NamedTuple):
    r1: float
    r2: float
    r3: float
    r4: float
    r1_prime: float


def stationarity_residuals(snap, objectives):
    """Distances from the four stationarity conditions.

    ``r1 = max ||alpha grad_u f_i + pi_i + rho (u_i - u)||``,
    ``r2 = max ||grad_v f_i||``, ``r3 = max ||u_i - u||``,
    ``r4 = ||sum pi_i||``; ``r1_prime = ||sum alpha_i grad_u f_i(v_i, u)||``
    is the residual of the original consensus problem.
    """
    s = snap.u.shape[0]
    r1 = r2 = r3 = 0.0
    g_total = np.zeros(s)
    pi_total = np.zeros(s)
    for i, obj in enumerate(objectives):
        v, ui, pi = snap.V[i], snap.U[i], snap.Pi[i]
        if ui.shape[0] != s or pi.shape[0] != s:
            raise ContractViolation("shared block dimensions disagree")
        _, gv, gu = obj.loss_and_grads(v, ui)
        r1 = max(r1, float(np.linalg.norm(snap.alpha[i] * gu + pi + snap.rho * (ui - snap.u))))
        r2 = max(r2, float(np.linalg.norm(gv)))
        r3 = max(r3, float(np.linalg.norm(ui - snap.u)))
        pi_total += pi
        g_total += snap.alpha[i] * obj.loss_and_grads(v, snap.u)[2]
    return Residuals(r1, r2, r3, float(np.linalg.norm(pi_total)), float(np.linalg.norm(g_total)))


def dist_sq(snap, objectives):
    """Squared norm of the full gradient of the Lyapunov function at ``P``."""
    total = 0.0
    grad_u = np.zeros_like(snap.u)
    for i, obj in enumerate(objectives):
        a, ui, pi = snap.alpha[i], snap.U[i], snap.Pi[i]
        _, gv, gu = obj.loss_and_grads(snap.V[i], ui)
        d = ui - snap.u
        gi = a * gu + pi + snap.rho * d
        total += a * a * float(gv @ gv) + float(gi @ gi) + float(d @ d)
        grad_u -= pi + snap.rho * d
    return total + float(grad_u @ grad_u)


def drift_metric(U, u):
    """Mean Euclidean distance ``(1/m) sum_i ||u_i - u||``."""
    if len(U) < 1:
        raise ContractViolation("need at least one client")
    return float(np.mean([np.linalg.norm(np.asarray(ui) - u) for ui in U]))


# --- transition checks ------------------------------------------------------

def step_sum(prev, cur):
    """``Sigma_p``: squared block steps summed over clients, with the
    shared-model step counted once per client."""
    du = float(np.sum((cur.u - prev.u) ** 2))
    total = 0.0
    for i in range(len(cur.U)):
        total += float(np.sum((cur.V[i] - prev.V[i]) ** 2))
        total += float(np.sum((cur.U[i] - prev.U[i]) ** 2)) + du
    return total


class Check(NamedTuple):
    lhs: float
    rhs: float
    ok: bool


def descent_check(lyap_prev, lyap_cur, sigma_p, a):
    """``Lt_prev - Lt_cur >= a Sigma_p`` up to ``1e-9 max(1, |Lt_prev|)``."""
    lhs, rhs = lyap_prev - lyap_cur, a * sigma_p
    return Check(lhs, rhs, lhs - rhs >= -CHECK_RTOL * max(1.0, abs(lyap_prev)))


def relative_error_check(dist_sq_prev, sigma_p, xi_drop, b):
    """``dist^2 <= b (Sigma_p + Xi_drop)`` with relative slack ``1e-9``."""
    rhs = b * (sigma_p + xi_drop)
    return Check(dist_sq_prev, rhs, dist_sq_prev <= rhs * (1.0 + CHECK_RTOL))


def dual_bound_check(prev, cur):
    """Per-client ``||d pi||^2 <= 24/(1-mu)(xi_prev - xi) + 4/15 rho^2 (||d u_i||^2 + ||d v||^2)``."""
    out = []
    for i in range(len(cur.U)):
        lhs = float(np.sum((cur.Pi[i] - prev.Pi[i]) ** 2))
        steps = float(np.sum((cur.U[i] - prev.U[i]) ** 2) + np.sum((cur.V[i] - prev.V[i]) ** 2))
        rhs = 24.0 / (1.0 - cur.mu[i]) * (prev.xi[i] - cur.xi[i]) + 4.0 / 15.0 * cur.rho ** 2 * steps
        out.append(Check(lhs, rhs, lhs <= rhs * (1.0 + CHECK_RTOL)))
    return out


def lower_bound_check(lyap, xi_sum, rho, f_consensus):
    """``Lt - 28/rho Xi >= f(V, u)`` up to the shared relative tolerance."""
    lhs = lyap - 28.0 / rho * xi_sum
    return Check(lhs, f_consensus, lhs - f_consensus >= -CHECK_RTOL * max(1.0, abs(lhs)))


# --- rate fitting -----------------------------------------------------------

class RateFit(NamedTuple):
    regime: str
    slope: float
    r_squared: float
    reason: str = ""


def _linfit(x, y):
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum((y - pred) ** 2)) / ss_tot if ss_tot > 0 else 0.0
    return float(coef[0]), r2


def rate_fit(gaps, min_length=20, r2_threshold=0.98, floor=1e-14):
    """Classify the decay of ``gaps`` from a least-squares fit of ``log gap``
    against the round index over the tail half.

    ``linear`` needs ``r^2 >= r2_threshold`` and a negative slope; a fit of
    ``log gap`` against ``log t`` meeting the same bar gives ``sublinear``.
    When both qualify the higher ``r^2`` wins.
    Gaps that are already at ``floor`` over the whole tail give ``finite``.
    """
    g = np.asarray(gaps, dtype=np.float64).reshape(-1)
    if g.shape[0] < min_length:
        raise ContractViolation(f"need at least {min_length} gaps, got {g.shape[0]}")
    if not np.all(np.isfinite(g)) or np.any(g <= 0):
        return RateFit("inconclusive", math.nan, math.nan, "non-positive or non-finite gap")
    t = np.arange(1, g.shape[0] + 1, dtype=np.float64)
    tail = slice(g.shape[0] // 2, None)
    if np.all(g[tail] <= 10 * floor):
        return RateFit("finite", 0.0, 1.0, "gap at the floor over the tail")
    y = np.log(g[tail])
    if np.ptp(y) <= 1e-12:
        return RateFit("inconclusive", 0.0, 0.0, "constant gaps")
    slope, r2 = _linfit(t[tail], y)
    s_log, r2_log = _linfit(np.log(t[tail]), y)
    linear_ok = slope < 0 and r2 >= r2_threshold
    sublinear_ok = s_log < 0 and r2_log >= r2_threshold
    # over a short tail both fits can pass; keep the better one
    if linear_ok and (not sublinear_ok or r2 >= r2_log):
        return RateFit("linear", slope, r2)
    if sublinear_ok:
        return RateFit("sublinear", s_log, r2_log)
    return RateFit("inconclusive", slope, r2, "no regime fits the tail")


# --- traced runs ------------------------------------------------------------

@dataclass
class TraceRow:
    round: int
    train_loss: float
    local_loss: float
    lagrangian: float
    lyapunov: float
    sigma_p: float
    xi_sum: float
    xi_drop: float
    descent: Check
    relerr: Check
    dual: list
    lower: Check
    residuals: Residuals
    drift: float
    full_participation: bool
    u_converged: bool


@dataclass
class TheoryTrace:
    """Rows ``1..T`` of a FedAPM run plus the constants used by the checks."""

    a: float
    b: float
    applicable: bool
    rows: list = field(default_factory=list)
    initial_lyapunov: float = math.nan

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows])

    @property
    def lyapunov_series(self):
        return np.concatenate([[self.initial_lyapunov], self.column("lyapunov")])


class PointEval(NamedTuple):
    snap: Snapshot
    lagrangian: float
    lyapunov: float
    dist_sq: float
    local_loss: float


def evaluate_point(state, objectives):
    snap = snapshot(state)
    losses = local_losses(snap, objectives)
    lag = lagrangian(snap, objectives, losses)
    return PointEval(snap, lag, lyapunov_value(snap, lagrangian_value=lag),
                     dist_sq(snap, objectives), float(snap.alpha @ losses))


def trace_row(prev, cur_state, objectives, a, b, info=None):
    """Row for the transition ``prev -> cur_state``; returns ``(row, PointEval)``."""
    cur = evaluate_point(cur_state, objectives)
    p, c = prev.snap, cur.snap
    sp = step_sum(p, c)
    xi_drop = float(np.sum(p.xi - c.xi))
    f_cons = consensus_loss(c, objectives)
    selected = info.selected if info is not None else tuple(range(len(c.U)))
    row = TraceRow(
        round=cur_state.round, train_loss=f_cons, local_loss=cur.local_loss,
        lagrangian=cur.lagrangian, lyapunov=cur.lyapunov, sigma_p=sp,
        xi_sum=float(np.sum(c.xi)), xi_drop=xi_drop,
        descent=descent_check(prev.lyapunov, cur.lyapunov, sp, a),
        relerr=relative_error_check(prev.dist_sq, sp, xi_drop, b),
        dual=dual_bound_check(p, c),
        lower=lower_bound_check(cur.lyapunov, float(np.sum(c.xi)), c.rho, f_cons),
        residuals=stationarity_residuals(c, objectives),
        drift=drift_metric(c.U, c.u),
        full_participation=len(selected) == len(c.U),
        u_converged=all(info.u_converged.values()) if info is not None else True)
    return row, cur


def traced_run(state, objectives, rounds, inner=InnerConfig(), workers=None, callback=None):
    """Run ``rounds`` FedAPM rounds and record a :class:`TheoryTrace`.

    ``callback(state, row)`` is called after each round.
    """
    a = descent_constant(state.rho, [c.sigma for c in state.clients])
    b = relerr_constant(state.rho, [c.sigma for c in state.clients],
                        [c.mu for c in state.clients])
    applicable = state.hyper is None or state.hyper.all_ok
    prev = evaluate_point(state, objectives)
    trace = TheoryTrace(a=a, b=b, applicable=applicable, initial_lyapunov=prev.lyapunov)
    for _ in range(rounds):
        state, info = run_round(state, objectives, inner, workers)
        row, prev = trace_row(prev, state, objectives, a, b, info)
        trace.rows.append(row)
        if callback is not None:
            callback(state, row)
    return state, trace
