"""Minibatch SGD on a client's two parameter blocks.

Shared by the baselines and by the engine's penalty mode so both draw
minibatches from the client stream in exactly the same order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DivergenceError


@dataclass(frozen=True)
class LocalConfig:
    """Budget and step of local SGD."""

    local_epochs: int = 3
    learning_rate: float = 0.1
    batch_size: int = 32

    def __post_init__(self):
        if self.local_epochs < 0:
            raise ContractViolation("local_epochs must be >= 0")
        if self.learning_rate < 0:
            raise ContractViolation("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")


def minibatches(n, batch_size, rng):
    """One epoch of sorted index batches from a fresh permutation."""
    perm = rng.permutation(n)
    b = min(batch_size, n)
    return [np.sort(perm[k:k + b]) for k in range(0, n, b)]


def local_sgd(grad_fn, v, u, n, epochs, lr, batch_size, rng, mode="joint",
              client=None, round=None):
    """Run ``epochs`` passes of minibatch SGD.

    ``grad_fn(v, u, idx)`` returns ``(grad_v, grad_u)`` on the batch ``idx``.
    ``mode`` picks the updated block: ``"joint"`` steps both from the same
    iterate, ``"v"`` or ``"u"`` only one (the other stays frozen).

    Returns ``(v, u, evals)`` where ``evals`` counts per-sample block-gradient
    evaluations, the budget unit shared by all methods.
    """
    if mode not in ("joint", "v", "u"):
        raise ContractViolation(f"unknown SGD mode {mode!r}")
    v, u = v.copy(), u.copy()
    blocks = {"joint": int(v.shape[0] > 0) + 1, "v": 1, "u": 1}[mode]
    evals = 0
    for _ in range(epochs):
        for idx in minibatches(n, batch_size, rng):
            gv, gu = grad_fn(v, u, idx)
            if mode in ("joint", "v"):
                v = v - lr * gv
            if mode in ("joint", "u"):
                u = u - lr * gu
            evals += blocks * idx.shape[0]
            if not (np.all(np.isfinite(v)) and np.all(np.isfinite(u))):
                raise DivergenceError("local SGD produced a non-finite iterate", client, round)
    return v, u, evals
