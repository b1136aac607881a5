"""Deterministic synthetic federations.

Two generators: heterogeneous Gaussian classification shards split across
clients with a per-class Dirichlet allocation, and coercive quadratic
consensus problems whose optimum is available in closed form.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.linalg import expm

from .errors import GenerationError
from .numcore import QuadraticObjective, SoftmaxSplitObjective


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a synthetic classification federation."""

    m: int = 20
    classes: int = 4
    feature_dim: int = 16
    samples_per_client: int = 200
    dirichlet_concentration: float = 0.5
    heterogeneity: float = 1.0
    seed: int = 0
    class_separation: float = 4.0
    strategy: str = "output"
    hidden: int = 8
    personal_features: tuple = field(default=())
    alpha_mode: str = "uniform"
    train_fraction: float = 0.8
    feature_rotation: float = 0.0

    def __post_init__(self):
        for name in ("m", "classes", "feature_dim", "samples_per_client"):
            if getattr(self, name) < 1:
                raise GenerationError(f"{name} must be >= 1")
        if not self.dirichlet_concentration > 0:
            raise GenerationError("dirichlet_concentration must be positive")
        if self.heterogeneity < 0:
            raise GenerationError("heterogeneity must be nonnegative")
        if self.feature_rotation < 0:
            raise GenerationError("feature_rotation must be nonnegative")
        if self.alpha_mode not in ("uniform", "proportional"):
            raise GenerationError(f"unknown alpha_mode {self.alpha_mode!r}")


def _largest_remainder(proportions, total):
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        # stable sort keeps ties in client order
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(labels, m, concentration, rng):
    """Split sample indices among ``m`` clients, class by class.

    For each class a proportion vector is drawn from a symmetric
    ``Dirichlet(concentration)`` and rounded to counts with the largest
    remainder rule.  A client left without samples receives one from the
    currently largest shard.
    """
    labels = np.asarray(labels).reshape(-1)
    if m < 1:
        raise GenerationError("m must be >= 1")
    if not concentration > 0:
        raise GenerationError("concentration must be positive")
    if labels.shape[0] < m:
        raise GenerationError(f"{labels.shape[0]} samples cannot cover {m} clients")
    shards = [[] for _ in range(m)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.shape[0])]
        props = rng.dirichlet(np.full(m, float(concentration)))
        counts = _largest_remainder(props, idx.shape[0])
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for i in range(m):
            shards[i].extend(idx[bounds[i]:bounds[i + 1]].tolist())
    for i in range(m):
        if not shards[i]:
            donor = max(range(m), key=lambda j: (len(shards[j]), -j))
            shards[i].append(shards[donor].pop())
    return [np.sort(np.asarray(s, dtype=np.int64)) for s in shards]


class ClientData(NamedTuple):
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray


class ClassificationProblem(NamedTuple):
    objectives: list
    clients: list
    spec: SyntheticSpec


def client_class_mix(spec, rng):
    """Per-client class proportions from a Dirichlet partition of a balanced pool."""
    pool = np.arange(spec.m * spec.samples_per_client) % spec.classes
    shards = dirichlet_partition(pool, spec.m, spec.dirichlet_concentration, rng)
    counts = np.stack([np.bincount(pool[s], minlength=spec.classes) for s in shards])
    return counts / counts.sum(axis=1, keepdims=True)


def make_classification_problem(spec):
    """Gaussian class-conditional data with Dirichlet label skew across clients.

    Each client holds exactly ``samples_per_client`` samples whose class mix
    is its share of a Dirichlet-partitioned balanced pool.  Class means sit
    ``class_separation`` apart (unit-variance noise); each client moves every
    class mean by its own random shift of norm ~``heterogeneity``.  A
    positive ``feature_rotation`` also applies a client-specific random
    rotation ``expm(feature_rotation * S_i)`` to the features (``S_i``
    skew-symmetric), as when sensors sit differently on each participant.
    Every client keeps a fixed 80/20 train/test split.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xDA7A]))
    d, C, m, n = spec.feature_dim, spec.classes, spec.m, spec.samples_per_client
    means = rng.standard_normal((C, d))
    means *= spec.class_separation / np.sqrt(2.0) / np.linalg.norm(means, axis=1, keepdims=True)
    mix = client_class_mix(spec, rng)
    shifts = rng.standard_normal((m, C, d)) * spec.heterogeneity / np.sqrt(d)
    objectives, clients = [], []
    for i in range(m):
        yi = np.repeat(np.arange(C), _largest_remainder(mix[i], n))
        Xi = means[yi] + shifts[i, yi] + rng.standard_normal((n, d))
        if spec.feature_rotation:
            G = rng.standard_normal((d, d))
            Xi = Xi @ expm(spec.feature_rotation * (G - G.T) / np.sqrt(2 * d)).T
        perm = rng.permutation(n)
        n_train = min(max(1, int(round(spec.train_fraction * n))), max(1, n - 1))
        tr, te = perm[:n_train], perm[n_train:]
        cd = ClientData(Xi[tr], yi[tr], Xi[te], yi[te])
        # equal shard sizes make the n_i/n weighting coincide with 1/m
        alpha = 1.0 / m
        objectives.append(SoftmaxSplitObjective(
            cd.X_train, cd.y_train, C, strategy=spec.strategy, hidden=spec.hidden,
            personal_features=list(spec.personal_features), alpha=alpha))
        clients.append(cd)
    return ClassificationProblem(objectives, clients, spec)


class QuadraticSolution(NamedTuple):
    V: list
    u: np.ndarray
    f_star: float


def consensus_solution(objectives):
    """Exact minimizer of ``sum_i alpha_i f_i(v_i, u)`` by block least squares."""
    s = objectives[0].spec.shared_dim
    p = objectives[0].spec.personal_dim
    m = len(objectives)
    rows, rhs = [], []
    for i, obj in enumerate(objectives):
        sw = np.sqrt(obj.alpha * obj.w)[:, None]
        block = np.zeros((obj.n_samples, s + m * p))
        block[:, :s] = sw * obj.A
        block[:, s + i * p: s + (i + 1) * p] = sw * obj.B
        rows.append(block)
        rhs.append(sw[:, 0] * obj.y)
    M, b = np.vstack(rows), np.concatenate(rhs)
    sol = np.linalg.lstsq(M, b, rcond=None)[0]
    u = sol[:s]
    V = [sol[s + i * p: s + (i + 1) * p].copy() for i in range(m)]
    f_star = sum(o.alpha * o.loss(V[i], u) for i, o in enumerate(objectives))
    return QuadraticSolution(V, u, float(f_star))


def _well_conditioned(rng, n, k, conditioning):
    Q1 = np.linalg.qr(rng.standard_normal((n, k)))[0]
    Q2 = np.linalg.qr(rng.standard_normal((k, k)))[0]
    sv = np.sqrt(np.geomspace(1.0, conditioning, k)) if k > 1 else np.ones(1)
    return (Q1 * sv) @ Q2.T


def make_quadratic_problem(m, shared_dim, personal_dim, conditioning=4.0, seed=0,
                           samples_per_client=None, heterogeneity=1.0, coupling=0.5,
                           max_retries=10):
    """Quadratic consensus federation with a closed-form optimum.

    ``A_i`` has singular values spread so that ``A_i^T A_i`` has eigenvalues
    in ``[1, conditioning]``; ``B_i`` is Gaussian scaled by ``coupling``.
    Client targets come from client-specific ground truths whose spread is
    ``heterogeneity``.  Returns ``(objectives, QuadraticSolution)``.
    """
    if m < 1 or shared_dim < 1 or personal_dim < 0:
        raise GenerationError("need m >= 1, shared_dim >= 1, personal_dim >= 0")
    if conditioning < 1:
        raise GenerationError("conditioning must be >= 1")
    n = samples_per_client or 2 * (shared_dim + personal_dim)
    if n < shared_dim + personal_dim:
        raise GenerationError("samples_per_client must cover shared_dim + personal_dim")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0AD]))
    u_true = rng.standard_normal(shared_dim)
    objectives = []
    for i in range(m):
        for attempt in range(max_retries):
            A = _well_conditioned(rng, n, shared_dim, conditioning)
            B = coupling * rng.standard_normal((n, personal_dim))
            if attempt:
                B += 1e-3 * attempt * rng.standard_normal(B.shape)
            if np.linalg.matrix_rank(np.hstack([A, B])) == shared_dim + personal_dim:
                break
        else:
            raise GenerationError(f"client {i}: could not draw a full-rank design")
        u_i = u_true + heterogeneity * rng.standard_normal(shared_dim)
        v_i = rng.standard_normal(personal_dim)
        y = A @ u_i + B @ v_i + 0.1 * rng.standard_normal(n)
        objectives.append(QuadraticObjective(A, B, y, alpha=1.0 / m))
    return objectives, consensus_solution(objectives)


def shards_to_text(problem):
    """Columnar text export: one row per sample, features then label.

    Columns are ``client,split,x0..x{d-1},label``.
    """
    buf = io.StringIO()
    d = problem.spec.feature_dim
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["client", "split"] + [f"x{k}" for k in range(d)] + ["label"])
    for i, cd in enumerate(problem.clients):
        for split, X, y in (("train", cd.X_train, cd.y_train), ("test", cd.X_test, cd.y_test)):
            for row, lab in zip(X, y):
                writer.writerow([i, split] + [f"{x:.12g}" for x in row] + [int(lab)])
    return buf.getvalue()
