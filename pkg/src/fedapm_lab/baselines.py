"""FedAvg, FedProx, FedAlt and FedSim on the same federation harness.

All four share the engine's state container, client RNG streams and
selection stream, so a baseline and FedAPM started from the same seed see
the same client subsets and the same minibatch order.

Local budget per selected client and round, in per-sample block-gradient
evaluations, is ``2 * local_epochs * n_i`` for every method: FedAvg, FedProx
and FedSim step both blocks for ``local_epochs`` epochs, FedAlt spends
``local_epochs`` epochs on each block in turn.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace

import numpy as np

from .engine import (ClientState, FederationState, _map_clients, aggregate,
                     client_rng, select_clients, selection_rng)
from .errors import ConfigError, ContractViolation
from .local import local_sgd
from .numcore import LipschitzEstimates, as_param

METHODS = ("fedavg", "fedprox", "fedalt", "fedsim")
LEARNING_RATE_GRID = (0.05, 0.1, 0.5, 1.0)


@dataclass(frozen=True)
class BaselineConfig:
    method: str = "fedavg"
    local_epochs: int = 3
    learning_rate: float = 0.1
    prox_weight: float = 0.0
    batch_size: int = 32

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError("method", f"unknown baseline {self.method!r}")
        if self.local_epochs < 0:
            raise ConfigError("local_epochs", "must be >= 0")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate", "must be nonnegative")
        if not self.prox_weight >= 0:
            raise ConfigError("prox_weight", "must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")


def init_baseline_state(objectives, seed=0, fraction=1.0, u0=None, v0=None):
    """Round-0 state: every client holds ``(v0, u0)``; ``v_global = v0``."""
    if not objectives:
        raise ContractViolation("need at least one client")
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("fraction", "must lie in (0, 1]")
    spec = objectives[0].spec
    u0 = np.zeros(spec.shared_dim) if u0 is None else as_param(u0, spec.shared_dim, "u0")
    v0 = np.zeros(spec.personal_dim) if v0 is None else as_param(v0, spec.personal_dim, "v0")
    clients = [ClientState(v=v0.copy(), u=u0.copy(), pi=np.zeros_like(u0), z=u0.copy(),
                           xi=0.0, mu=0.5, sigma=0.0, alpha=o.alpha, rng=client_rng(seed, i))
               for i, o in enumerate(objectives)]
    return FederationState(u=u0.copy(), clients=clients, round=0, rho=0.0,
                           selection_fraction=float(fraction),
                           selection_rng=selection_rng(seed),
                           lipschitz=LipschitzEstimates(0.0, 0.0, 0.0, 0.0),
                           v_global=v0.copy())


def weighted_mean(anchor, vectors, weights):
    """``sum w_k x_k / sum w_k`` written as a correction to ``anchor``.

    Exact when every vector equals the anchor.
    """
    weights = np.asarray(weights, dtype=np.float64)
    acc = np.zeros_like(anchor)
    for w, x in zip(weights / weights.sum(), vectors):
        acc += w * (x - anchor)
    return anchor + acc


def _global_round(state, objectives, cfg, workers, prox_weight):
    t = state.round
    u_t, v_t = state.u, state.v_global
    sel_rng = copy.deepcopy(state.selection_rng)
    selected = select_clients(state.m, state.selection_fraction, sel_rng)

    def work(i):
        obj, c = objectives[i], state.clients[i]
        rng = copy.deepcopy(c.rng)

        def grad(v, u, idx):
            _, gv, gu = obj.loss_and_grads(v, u, idx)
            if prox_weight:
                gv, gu = gv + prox_weight * (v - v_t), gu + prox_weight * (u - u_t)
            return gv, gu

        v, u, _ = local_sgd(grad, v_t, u_t, obj.n_samples, cfg.local_epochs,
                            cfg.learning_rate, cfg.batch_size, rng, "joint", i, t)
        return replace(c, v=v, u=u, z=u.copy(), rng=rng)

    results = _map_clients(work, selected, workers)
    clients = list(state.clients)
    for i, c in zip(selected, results):
        clients[i] = c
    w = [clients[i].alpha for i in selected]
    u_new = weighted_mean(u_t, [c.u for c in results], w)
    v_new = weighted_mean(v_t, [c.v for c in results], w)
    return replace(state, u=u_new, v_global=v_new, clients=clients, round=t + 1,
                   selection_rng=sel_rng)


def fedavg_round(state, objectives, cfg=BaselineConfig(), workers=None):
    """Selected clients run local SGD from the global model; the server
    takes the alpha-weighted mean of the returned models."""
    return _global_round(state, objectives, cfg, workers, 0.0)


def fedprox_round(state, objectives, cfg=BaselineConfig(method="fedprox"), workers=None):
    """FedAvg with ``prox_weight/2 ||w - w_global||^2`` added to every local loss."""
    return _global_round(state, objectives, cfg, workers, cfg.prox_weight)


def _personal_round(state, objectives, cfg, workers, variant):
    t = state.round
    u_t = state.u
    sel_rng = copy.deepcopy(state.selection_rng)
    selected = select_clients(state.m, state.selection_fraction, sel_rng)

    def work(i):
        obj, c = objectives[i], state.clients[i]
        rng = copy.deepcopy(c.rng)

        def grad(v, u, idx):
            _, gv, gu = obj.loss_and_grads(v, u, idx)
            return gv, gu

        n, E, lr, bs = obj.n_samples, cfg.local_epochs, cfg.learning_rate, cfg.batch_size
        v, u = c.v, u_t.copy()
        if variant == "alt":
            if v.shape[0] > 0:
                v, u, _ = local_sgd(grad, v, u, n, E, lr, bs, rng, "v", i, t)
            v, u, _ = local_sgd(grad, v, u, n, E, lr, bs, rng, "u", i, t)
        else:
            v, u, _ = local_sgd(grad, v, u, n, E, lr, bs, rng, "joint", i, t)
        return replace(c, v=v, u=u, z=u.copy(), rng=rng)

    results = _map_clients(work, selected, workers)
    clients = list(state.clients)
    for i, c in zip(selected, results):
        clients[i] = c
    if len(selected) == state.m and len({c.alpha for c in clients}) == 1:
        # same arithmetic as the engine's aggregation step
        u_new = aggregate([c.u for c in clients])
    else:
        u_new = weighted_mean(u_t, [c.u for c in results], [c.alpha for c in results])
    return replace(state, u=u_new, clients=clients, round=t + 1, selection_rng=sel_rng)


def fedalt_round(state, objectives, cfg=BaselineConfig(method="fedalt"), workers=None):
    """Gauss-Seidel local update: personal block first with the broadcast
    shared block frozen, then the shared block with the new personal block."""
    return _personal_round(state, objectives, cfg, workers, "alt")


def fedsim_round(state, objectives, cfg=BaselineConfig(method="fedsim"), workers=None):
    """Jacobi local update: both blocks step from the same iterate."""
    return _personal_round(state, objectives, cfg, workers, "sim")


ROUND_FUNCTIONS = {"fedavg": fedavg_round, "fedprox": fedprox_round,
                   "fedalt": fedalt_round, "fedsim": fedsim_round}


def baseline_round(state, objectives, cfg, workers=None):
    return ROUND_FUNCTIONS[cfg.method](state, objectives, cfg, workers)
