"""FedAPM: consensus ADMM with partial model personalization.

One communication round (``run_round``) does, in order:

1. every client uploads ``z_i = u_i + pi_i / rho``;
2. the server averages them into the shared model ``u`` and broadcasts it;
3. a random subset of clients is selected;
4. each selected client runs a proximal update of its personal block ``v_i``,
   shrinks its accuracy level ``xi_i <- mu_i * xi_i``, finds a
   ``xi_i``-approximate minimizer ``u_i`` of its augmented Lagrangian, then
   updates the dual ``pi_i`` and its message ``z_i``;
5. unselected clients keep every quantity unchanged.

The augmented Lagrangian of client ``i`` is::

    L_i = alpha_i f_i(v_i, u_i) + <pi_i, u_i - u> + rho/2 ||u_i - u||^2
"""

from __future__ import annotations

import copy
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ContractViolation, DivergenceError
from .local import local_sgd
from .numcore import LipschitzEstimates, as_param, estimate_lipschitz

#: Environment variable read for the default number of client worker threads.
WORKERS_ENV = "FEDAPM_WORKERS"


@dataclass(frozen=True)
class InnerConfig:
    """Local subproblem solver settings.

    ``v_*`` configure full-batch gradient descent on the proximal v-problem;
    ``u_*`` configure minibatch SGD on the u-problem, whose residual is
    checked after every full pass.  The u-solver also gives up once the
    residual has not improved for ``u_stall_passes`` consecutive passes
    (it has reached the floating-point floor).

    ``mode="epochs"`` replaces both solvers by a fixed budget of
    ``epochs`` minibatch SGD epochs per subproblem with step
    ``learning_rate / alpha_i`` (the local budget of the baselines); the
    u-residual is still measured and flagged against ``xi``.  ``u_start``
    picks the SGD starting point of the u-problem in that mode: the
    client's previous ``u_i`` (``"local"``) or the broadcast ``u``.
    """

    v_tol: float = 1e-8
    v_max_iters: int = 500
    u_max_passes: int = 500
    batch_size: int = 32
    u_stall_passes: int = 5
    mode: str = "theory"
    epochs: int = 3
    learning_rate: float = 0.1
    u_start: str = "local"

    def __post_init__(self):
        if self.v_tol < 0 or self.v_max_iters < 0 or self.u_max_passes < 0:
            raise ContractViolation("inner solver limits must be nonnegative")
        if self.batch_size < 1 or self.u_stall_passes < 1:
            raise ContractViolation("batch_size and u_stall_passes must be >= 1")
        if self.mode not in ("theory", "epochs"):
            raise ContractViolation(f"unknown inner mode {self.mode!r}")
        if self.u_start not in ("local", "broadcast"):
            raise ContractViolation(f"unknown u_start {self.u_start!r}")
        if self.epochs < 0 or not self.learning_rate >= 0:
            raise ContractViolation("epochs and learning_rate must be nonnegative")


@dataclass
class ClientState:
    v: np.ndarray
    u: np.ndarray
    pi: np.ndarray
    z: np.ndarray
    xi: float
    mu: float
    sigma: float
    alpha: float
    rng: np.random.Generator
    lipschitz: LipschitzEstimates = LipschitzEstimates(0.0, 0.0, 0.0, 0.0)


class HyperparamCheck(NamedTuple):
    """Per-client status of the step-size conditions used by the analysis.

    ``ok[i]`` holds iff ``max(3 a_i L_u, 3 a_i L_uv) <= rho <= 15/8 sigma_i``
    and ``sigma_i >= a_i L_v``.  ``margins[i]`` is the smallest slack of the
    three inequalities (negative when violated).  ``rate_ok`` additionally
    requires ``rho >= 2 L_u``.
    """

    ok: tuple
    margins: tuple
    rate_ok: bool

    @property
    def all_ok(self):
        return all(self.ok)


@dataclass
class FederationState:
    u: np.ndarray
    clients: list
    round: int
    rho: float
    selection_fraction: float
    selection_rng: np.random.Generator
    lipschitz: LipschitzEstimates = LipschitzEstimates(0.0, 0.0, 0.0, 0.0)
    hyper: HyperparamCheck | None = None
    override: bool = False
    v_global: np.ndarray | None = None

    @property
    def m(self):
        return len(self.clients)


class USolve(NamedTuple):
    u: np.ndarray
    residual_sq: float
    converged: bool
    passes: int


class RoundInfo(NamedTuple):
    """What one engine round did, beyond the new state."""

    round: int
    u_broadcast: np.ndarray
    selected: tuple
    u_residual_sq: dict
    u_converged: dict


def client_rng(seed, client_id):
    """Private RNG stream of one client."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, client_id)))


def selection_rng(seed):
    """RNG stream used only for client selection."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))


def init_rng(seed):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))


def default_workers():
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


# --- hyperparameters --------------------------------------------------------

def auto_hyperparams(lipschitz, alphas):
    """Smallest ``rho`` and per-client ``sigma_i`` meeting the conditions.

    ``lipschitz`` holds the constants valid for every client.
    """
    L = lipschitz
    rho = max(max(3 * a * L.L_u, 3 * a * L.L_uv) for a in alphas)
    rho = max(rho, 2 * L.L_u)
    if rho <= 0:
        raise ConfigError("rho", "auto mode needs a positive Lipschitz constant")
    sigmas = [1.05 * max(8.0 / 15.0 * rho, a * L.L_v) for a in alphas]
    return rho, sigmas


def check_hyperparams(rho, sigmas, alphas, lipschitz):
    L = lipschitz
    ok, margins = [], []
    for s, a in zip(sigmas, alphas):
        slack = (rho - max(3 * a * L.L_u, 3 * a * L.L_uv),
                 15.0 / 8.0 * s - rho,
                 s - a * L.L_v)
        margins.append(min(slack))
        ok.append(min(slack) >= 0)
    return HyperparamCheck(tuple(ok), tuple(margins), rho >= 2 * L.L_u)


def init_federation(objectives, rho=None, sigma=None, seed=0, xi0=1.0, mu=0.5,
                    fraction=1.0, u0=None, v0=None, dual_init="zero",
                    lipschitz=None, override=False, n_probes=64):
    """Build the round-0 state.

    ``rho=None`` (and ``sigma=None``) select the automatic hyperparameters
    from the estimated Lipschitz constants.  ``sigma`` may be a scalar or one
    value per client.  ``dual_init="zero"`` starts with ``pi_i = 0``;
    ``"consistent"`` starts with ``pi_i = -alpha_i grad_u f_i(v_i, u_i)``, so
    the initial point is already an exact u-subproblem solution.

    ``override=True`` lets rounds run even if the conditions of
    :class:`HyperparamCheck` fail.
    """
    m = len(objectives)
    if m < 1:
        raise ContractViolation("need at least one client")
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("fraction", "must lie in (0, 1]")
    if not 0.0 < mu < 1.0:
        raise ConfigError("mu", "must lie in (0, 1)")
    if not xi0 > 0:
        raise ConfigError("xi0", "must be positive")
    if dual_init not in ("zero", "consistent"):
        raise ConfigError("dual_init", f"unknown value {dual_init!r}")
    spec = objectives[0].spec
    if any(o.spec.shared_dim != spec.shared_dim or o.spec.personal_dim != spec.personal_dim
           for o in objectives):
        raise ContractViolation("all clients must share the block dimensions")
    alphas = [o.alpha for o in objectives]
    if lipschitz is None:
        lipschitz = [estimate_lipschitz(o, n_probes, seed=seed * 7919 + i)
                     for i, o in enumerate(objectives)]
    global_L = LipschitzEstimates.max_over(lipschitz)
    if rho is None:
        rho, auto_sigmas = auto_hyperparams(global_L, alphas)
        if sigma is None:
            sigma = auto_sigmas
    elif sigma is None:
        sigma = [1.05 * max(8.0 / 15.0 * rho, a * global_L.L_v) for a in alphas]
    if not rho > 0:
        raise ConfigError("rho", "rho must be positive")
    sigmas = list(np.broadcast_to(np.asarray(sigma, dtype=np.float64), (m,)))
    if any(not s > 0 for s in sigmas):
        raise ConfigError("sigma", "must be positive")
    u0 = np.zeros(spec.shared_dim) if u0 is None else as_param(u0, spec.shared_dim, "u0")
    v0 = np.zeros(spec.personal_dim) if v0 is None else as_param(v0, spec.personal_dim, "v0")
    clients = []
    for i, obj in enumerate(objectives):
        pi = np.zeros(spec.shared_dim)
        if dual_init == "consistent":
            pi = -obj.alpha * obj.loss_and_grads(v0, u0)[2]
        clients.append(ClientState(
            v=v0.copy(), u=u0.copy(), pi=pi, z=u0 + pi / rho, xi=float(xi0),
            mu=float(mu), sigma=float(sigmas[i]), alpha=obj.alpha,
            rng=client_rng(seed, i), lipschitz=lipschitz[i]))
    hyper = check_hyperparams(rho, sigmas, alphas, global_L)
    return FederationState(
        u=aggregate([c.z for c in clients]), clients=clients, round=0, rho=float(rho),
        selection_fraction=float(fraction), selection_rng=selection_rng(seed),
        lipschitz=global_L, hyper=hyper, override=override)


# --- building blocks --------------------------------------------------------

def aug_lagrangian_i(obj, v, u_i, pi_i, u, rho, alpha=None):
    """``alpha f(v, u_i) + <pi_i, u_i - u> + rho/2 ||u_i - u||^2``."""
    if not rho > 0:
        raise ContractViolation("rho must be positive")
    alpha = obj.alpha if alpha is None else alpha
    s = obj.spec.shared_dim
    u_i, pi_i, u = as_param(u_i, s, "u_i"), as_param(pi_i, s, "pi_i"), as_param(u, s, "u")
    d = u_i - u
    return alpha * obj.loss(v, u_i) + float(pi_i @ d) + 0.5 * rho * float(d @ d)


def solve_v_prox(obj, v_t, u_i_t, sigma, inner=InnerConfig(), alpha=None, L_v=None,
                 client=None, round=None):
    """Minimize ``alpha f(v, u_i_t) + sigma/2 ||v - v_t||^2`` by gradient descent.

    Step ``1/(alpha L_v + sigma)``; stops when the subproblem gradient norm is
    at most ``inner.v_tol`` or after ``inner.v_max_iters`` steps.
    """
    if not sigma > 0:
        raise ContractViolation("sigma must be positive")
    alpha = obj.alpha if alpha is None else alpha
    v_t = as_param(v_t, obj.spec.personal_dim, "v_t")
    if v_t.shape[0] == 0:
        return v_t.copy()
    if L_v is None:
        L_v = estimate_lipschitz(obj).L_v
    step = 1.0 / (alpha * L_v + sigma)
    v = v_t.copy()
    for _ in range(inner.v_max_iters + 1):
        g = alpha * obj.loss_and_grads(v, u_i_t)[1] + sigma * (v - v_t)
        if not np.all(np.isfinite(g)):
            raise DivergenceError("v-update produced a non-finite gradient", client, round)
        if np.linalg.norm(g) <= inner.v_tol:
            break
        v = v - step * g
        if not np.all(np.isfinite(v)):
            raise DivergenceError("v-update produced a non-finite iterate", client, round)
    return v


def u_residual(obj, v, u, pi, u_t, rho, alpha):
    """Gradient of the u-subproblem: ``alpha grad_u f + pi + rho (u - u_t)``."""
    return alpha * obj.loss_and_grads(v, u)[2] + pi + rho * (u - u_t)


def solve_u_approx(obj, v_new, u_i_t, pi_t, u_t, rho, alpha, xi_target,
                   inner=InnerConfig(), rng=None, L_u=None, client=None, round=None):
    """Find ``u`` with ``||alpha grad_u f(v_new, u) + pi_t + rho (u - u_t)||^2 <= xi``.

    Minibatch SGD from ``u_i_t`` with constant step ``1/(alpha L_u + rho)``;
    the full residual is checked before the first pass and after each pass,
    and the best iterate seen is returned.
    Returns a :class:`USolve`; ``converged`` is False when the target was not
    reached within the pass budget.
    """
    if not 0.0 < xi_target < 1.0:
        raise ContractViolation("xi_target must lie in (0, 1)")
    if not rho > 0:
        raise ContractViolation("rho must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    if L_u is None:
        L_u = estimate_lipschitz(obj).L_u
    step = 1.0 / (alpha * L_u + rho)
    n = obj.n_samples
    b = min(inner.batch_size, n)
    u = as_param(u_i_t, obj.spec.shared_dim, "u_i_t").copy()
    r = u_residual(obj, v_new, u, pi_t, u_t, rho, alpha)
    res = float(r @ r)
    best_u, best, stall, passes = u, res, 0, 0
    while best > xi_target and passes < inner.u_max_passes:
        perm = rng.permutation(n)
        for k in range(0, n, b):
            idx = np.sort(perm[k:k + b])
            g = alpha * obj.loss_and_grads(v_new, u, idx)[2] + pi_t + rho * (u - u_t)
            u = u - step * g
            if not np.all(np.isfinite(u)):
                raise DivergenceError("u-update produced a non-finite iterate", client, round)
        passes += 1
        r = u_residual(obj, v_new, u, pi_t, u_t, rho, alpha)
        res = float(r @ r)
        if res < best:
            best_u, best, stall = u, res, 0
        else:
            stall += 1
            if stall >= inner.u_stall_passes:
                break
    # constant-step SGD oscillates at its noise floor; keep the best pass
    return USolve(best_u, best, best <= xi_target, passes)


def update_dual_and_z(u_new, u_t, pi_t, rho):
    """Dual ascent ``pi + rho (u_new - u_t)`` and upload message ``u_new + pi/rho``."""
    if not rho > 0:
        raise ContractViolation("rho must be positive")
    u_new, u_t, pi_t = (np.asarray(x, dtype=np.float64) for x in (u_new, u_t, pi_t))
    if not (u_new.shape == u_t.shape == pi_t.shape):
        raise ContractViolation("dimension mismatch in dual update")
    pi_new = pi_t + rho * (u_new - u_t)
    return pi_new, u_new + pi_new / rho


def aggregate(z_all):
    """Arithmetic mean of the uploaded messages, accumulated in client order.

    Computed as ``z_0 + mean(z_i - z_0)`` so identical messages average to
    themselves exactly.
    """
    z_all = [np.asarray(z, dtype=np.float64) for z in z_all]
    if not z_all:
        raise ContractViolation("cannot aggregate an empty set of messages")
    base = z_all[0]
    acc = np.zeros_like(base)
    for z in z_all:
        if z.shape != base.shape:
            raise ContractViolation("messages must share one dimension")
        acc += z - base
    return base + acc / len(z_all)


def select_clients(m, fraction, rng):
    """Sorted indices of ``max(1, round(fraction * m))`` distinct clients."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("fraction", "must lie in (0, 1]")
    s = max(1, int(round(fraction * m)))
    if s >= m:
        return np.arange(m)
    return np.sort(rng.choice(m, size=s, replace=False))


# --- rounds -----------------------------------------------------------------

def _epoch_update(obj, c, u_t, rho, inner, t, i):
    rng = copy.deepcopy(c.rng)
    a, v_t, lr = c.alpha, c.v, inner.learning_rate / c.alpha
    n, E, bs = obj.n_samples, inner.epochs, inner.batch_size

    def grad(v, u, idx):
        _, gv, gu = obj.loss_and_grads(v, u, idx)
        return a * gv + c.sigma * (v - v_t), a * gu + c.pi + rho * (u - u_t)

    v, u = c.v, (u_t.copy() if inner.u_start == "broadcast" else c.u)
    if v.shape[0] > 0:
        v, u, _ = local_sgd(grad, v, u, n, E, lr, bs, rng, "v", i, t)
    v, u, _ = local_sgd(grad, v, u, n, E, lr, bs, rng, "u", i, t)
    xi_new = c.mu * c.xi
    r = u_residual(obj, v, u, c.pi, u_t, rho, a)
    res = float(r @ r)
    sol = USolve(u, res, res <= xi_new, E)
    pi_new, z_new = update_dual_and_z(u, u_t, c.pi, rho)
    return replace(c, v=v, u=u, pi=pi_new, z=z_new, xi=xi_new, rng=rng), sol


def _client_update(obj, c, u_t, rho, inner, t, i):
    if inner.mode == "epochs":
        return _epoch_update(obj, c, u_t, rho, inner, t, i)
    rng = copy.deepcopy(c.rng)
    v_new = solve_v_prox(obj, c.v, c.u, c.sigma, inner, alpha=c.alpha,
                         L_v=c.lipschitz.L_v, client=i, round=t)
    xi_new = c.mu * c.xi
    sol = solve_u_approx(obj, v_new, c.u, c.pi, u_t, rho, c.alpha, xi_new, inner,
                         rng=rng, L_u=c.lipschitz.L_u, client=i, round=t)
    pi_new, z_new = update_dual_and_z(sol.u, u_t, c.pi, rho)
    return replace(c, v=v_new, u=sol.u, pi=pi_new, z=z_new, xi=xi_new, rng=rng), sol


def _map_clients(fn, selected, workers):
    workers = default_workers() if workers is None else workers
    if workers > 1 and len(selected) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, selected))
    return [fn(i) for i in selected]


def run_round(state, objectives, inner=InnerConfig(), workers=None):
    """One FedAPM communication round; returns ``(new_state, RoundInfo)``."""
    if state.hyper is not None and not state.hyper.all_ok and not state.override:
        raise ConfigError("rho", "hyperparameters violate the step-size conditions "
                          "(pass override=True to run anyway)")
    t = state.round
    u_t = aggregate([c.z for c in state.clients])
    sel_rng = copy.deepcopy(state.selection_rng)
    selected = select_clients(state.m, state.selection_fraction, sel_rng)

    def work(i):
        return _client_update(objectives[i], state.clients[i], u_t, state.rho, inner, t, i)

    results = _map_clients(work, selected, workers)
    clients = list(state.clients)
    residuals, converged = {}, {}
    for i, (c, sol) in zip(selected, results):
        clients[i] = c
        residuals[int(i)] = sol.residual_sq
        converged[int(i)] = sol.converged
    new = replace(state, u=u_t, clients=clients, round=t + 1, selection_rng=sel_rng)
    return new, RoundInfo(t, u_t, tuple(int(i) for i in selected), residuals, converged)


def penalty_mode_round(state, objectives, local, variant, workers=None):
    """FedAPM with ``pi = 0``, ``rho = 0`` and ``u_i`` restarted from ``u``.

    In this limit the message is ``z_i = u_i`` and each subproblem is solved
    by ``local.local_epochs`` SGD epochs on ``alpha_i f_i`` with step
    ``learning_rate / alpha_i``.  ``variant="alt"`` solves the v-problem then
    the u-problem (Gauss-Seidel); ``"sim"`` steps both blocks together
    (Jacobi).  These are the FedAlt and FedSim local updates.
    """
    if variant not in ("alt", "sim"):
        raise ContractViolation(f"unknown variant {variant!r}")
    t = state.round
    u_t = aggregate([c.z for c in state.clients])
    sel_rng = copy.deepcopy(state.selection_rng)
    selected = select_clients(state.m, state.selection_fraction, sel_rng)

    def work(i):
        obj, c = objectives[i], state.clients[i]
        rng = copy.deepcopy(c.rng)
        a = c.alpha

        def grad(v, u, idx):
            # Lagrangian gradient once pi and rho vanish
            _, gv, gu = obj.loss_and_grads(v, u, idx)
            return a * gv, a * gu

        lr = local.learning_rate / a
        v, u = c.v, u_t.copy()
        n, E, bs = obj.n_samples, local.local_epochs, local.batch_size
        if variant == "alt":
            if v.shape[0] > 0:
                v, u, _ = local_sgd(grad, v, u, n, E, lr, bs, rng, "v", i, t)
            v, u, _ = local_sgd(grad, v, u, n, E, lr, bs, rng, "u", i, t)
        else:
            v, u, _ = local_sgd(grad, v, u, n, E, lr, bs, rng, "joint", i, t)
        return replace(c, v=v, u=u, pi=np.zeros_like(u), z=u.copy(), rng=rng)

    results = _map_clients(work, selected, workers)
    clients = list(state.clients)
    for i, c in zip(selected, results):
        clients[i] = c
    return replace(state, u=u_t, clients=clients, round=t + 1, selection_rng=sel_rng)


def snapshot_u(state):
    """Shared model the next round will broadcast, ``mean(z_i)``."""
    return aggregate([c.z for c in state.clients])
