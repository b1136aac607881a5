"""FedAPM on a strongly convex quadratic federation.

Runs the algorithm with automatically chosen hyperparameters and checks,
round by round, the inequalities behind its convergence guarantee: the
Lyapunov function decreases, the gradient is bounded by the step sizes, the
dual steps are controlled, and the Lyapunov function bounds the loss from
above.  At the end the iterate is compared with the closed-form optimum and
the decay of the Lyapunov gap is classified.

    python demos/quadratic_theory.py [rounds]
"""

import sys

import numpy as np

from fedapm_lab import init_federation, make_quadratic_problem, rate_fit, traced_run
from fedapm_lab.diagnostics import snapshot, stationarity_residuals


def main(rounds=200):
    objectives, solution = make_quadratic_problem(m=8, shared_dim=6, personal_dim=2, seed=0)
    state = init_federation(objectives, seed=0)
    print(f"rho = {state.rho:.3f}, sigma = {state.clients[0].sigma:.3f}, "
          f"conditions met: {state.hyper.all_ok}")

    state, trace = traced_run(state, objectives, rounds)
    print(f"a = {trace.a:.4g}, b = {trace.b:.4g}")
    print(f"{'round':>5} {'loss':>12} {'lyapunov':>12} {'r1':>9} {'r3':>9} {'r4':>9}")
    for row in trace.rows[:: max(1, rounds // 10)]:
        r = row.residuals
        print(f"{row.round:5d} {row.train_loss:12.6f} {row.lyapunov:12.6f} "
              f"{r.r1:9.2e} {r.r3:9.2e} {r.r4:9.2e}")

    checks = {
        "descent": sum(not r.descent.ok for r in trace.rows),
        "relative error": sum(not r.relerr.ok for r in trace.rows),
        "dual step": sum(not c.ok for r in trace.rows for c in r.dual),
        "lower bound": sum(not r.lower.ok for r in trace.rows),
    }
    for name, bad in checks.items():
        print(f"{name:>15}: {bad} violations")

    snap = snapshot(state)
    err = np.sqrt(np.sum((snap.u - solution.u) ** 2)
                  + sum(np.sum((v - w) ** 2) for v, w in zip(snap.V, solution.V)))
    print(f"final loss {trace.rows[-1].train_loss:.8f} vs optimum {solution.f_star:.8f}")
    print(f"distance to optimum {err:.3e}, residuals {stationarity_residuals(snap, objectives)}")

    # the limit value comes from a run three times as long
    _, tail = traced_run(state, objectives, 2 * rounds)
    gaps = trace.column("lyapunov") - tail.rows[-1].lyapunov + 1e-14
    fit = rate_fit(gaps)
    print(f"Lyapunov gap decay: {fit.regime}, slope {fit.slope:.4f} "
          f"(factor {np.exp(fit.slope):.4f} per round), r^2 {fit.r_squared:.5f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 200)
