"""Split-model objectives, analytic gradients and gradient-Lipschitz estimates.

Every objective is a function ``f(v, u)`` of a personal block ``v`` and a
shared block ``u``, both flat float64 vectors.  Two kinds are provided:

* :class:`QuadraticObjective` -- ``0.5 * sum_k w_k (a_k.u + b_k.v - y_k)**2``,
  the strongly convex, coercive test case with exact spectral constants.
* :class:`SoftmaxSplitObjective` -- a two-block linear softmax classifier
  with mean cross-entropy loss.  The blocks are composed according to the
  personalization strategy (``input``, ``output`` or ``split_input``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ContractViolation, EstimationError, InvalidObjectiveError

STRATEGIES = ("input", "output", "split_input")

#: Multiplier applied to sampled (non-spectral) Lipschitz estimates.
LIPSCHITZ_SAFETY = 1.5


def as_param(x, dim=None, name="parameter"):
    """Return ``x`` as a 1-d float64 array, checking finiteness and length."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise ContractViolation(f"{name} must be 1-d, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ContractViolation(f"{name} has dim {arr.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{name} contains non-finite entries")
    return arr


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SplitSpec:
    """Sizes of the shared and personal parameter blocks."""

    shared_dim: int
    personal_dim: int
    strategy: str = "output"

    def __post_init__(self):
        if self.shared_dim < 1:
            raise ContractViolation("shared_dim must be >= 1")
        if self.personal_dim < 0:
            raise ContractViolation("personal_dim must be >= 0")
        if self.strategy not in STRATEGIES:
            raise ContractViolation(f"unknown strategy {self.strategy!r}")


class LipschitzEstimates(NamedTuple):
    """Gradient-Lipschitz constants of one objective (Euclidean norm).

    ``L_u``/``L_v`` bound how fast the u-/v-gradient moves with its own
    block; ``L_uv`` is the sensitivity of the u-gradient to ``v`` and
    ``L_vu`` that of the v-gradient to ``u``.
    """

    L_u: float
    L_v: float
    L_uv: float
    L_vu: float

    @classmethod
    def max_over(cls, estimates):
        """Elementwise maximum, i.e. constants valid for every client."""
        arr = np.array([tuple(e) for e in estimates], dtype=np.float64)
        return cls(*(float(x) for x in arr.max(axis=0)))


class LocalObjective:
    """Base class: a client's loss over its data shard.

    Subclasses implement :meth:`_batch`, returning loss and gradients on a
    subset of rows, scaled so that the full-index call is the exact loss and
    a random minibatch gives an unbiased estimate.
    """

    kind = "abstract"

    def __init__(self, spec, alpha=1.0):
        if not 0.0 < alpha <= 1.0:
            raise ContractViolation(f"alpha must lie in (0, 1], got {alpha}")
        self.spec = spec
        self.alpha = float(alpha)

    @property
    def n_samples(self):
        raise NotImplementedError

    def _batch(self, v, u, idx):
        raise NotImplementedError

    def _check(self, v, u):
        v = as_param(v, self.spec.personal_dim, "v")
        u = as_param(u, self.spec.shared_dim, "u")
        return v, u

    def loss_and_grads(self, v, u, idx=None):
        """Loss and partial gradients; ``idx`` selects a minibatch of rows."""
        v, u = self._check(v, u)
        if idx is None:
            idx = slice(None)
        return self._batch(v, u, idx)

    def loss(self, v, u):
        return self.loss_and_grads(v, u)[0]


class QuadraticObjective(LocalObjective):
    """``f(v, u) = 0.5 * sum_k w_k (A u + B v - y)_k**2``.

    Zero sample weights give the identically-zero objective.
    """

    kind = "quadratic"

    def __init__(self, A, B, y, alpha=1.0, sample_weights=None):
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        n = A.shape[0]
        if n == 0:
            raise InvalidObjectiveError("empty data shard")
        B = np.asarray(B, dtype=np.float64)
        if B.size == 0:
            B = np.zeros((n, 0))
        B = B.reshape(n, -1)
        if y.shape[0] != n:
            raise ContractViolation("A, B and y must have the same number of rows")
        if sample_weights is None:
            sample_weights = np.ones(n)
        w = np.asarray(sample_weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != n or np.any(w < 0):
            raise ContractViolation("sample_weights must be nonnegative, one per row")
        super().__init__(SplitSpec(A.shape[1], B.shape[1], "split_input"), alpha)
        self.A, self.B, self.y, self.w = _frozen(A), _frozen(B), _frozen(y), _frozen(w)

    @property
    def n_samples(self):
        return self.A.shape[0]

    def _batch(self, v, u, idx):
        A, B, y, w = self.A[idx], self.B[idx], self.y[idx], self.w[idx]
        scale = self.n_samples / A.shape[0]
        r = A @ u + B @ v - y
        wr = w * r
        loss = 0.5 * scale * float(r @ wr)
        return loss, scale * (B.T @ wr), scale * (A.T @ wr)

    def lipschitz(self, rng=None, tol=1e-15, max_iter=20000):
        """Exact constants via power iteration on the weighted Gram blocks."""
        rng = np.random.default_rng(0) if rng is None else rng
        sw = np.sqrt(self.w)[:, None]
        Aw, Bw = sw * self.A, sw * self.B
        L_u = power_iteration(lambda x: Aw.T @ (Aw @ x), Aw.shape[1], rng, tol, max_iter)
        L_v = power_iteration(lambda x: Bw.T @ (Bw @ x), Bw.shape[1], rng, tol, max_iter)
        C = Aw.T @ Bw
        L_uv = np.sqrt(power_iteration(lambda x: C.T @ (C @ x), C.shape[1], rng, tol, max_iter))
        return LipschitzEstimates(L_u, L_v, float(L_uv), float(L_uv))

    def minimizer(self):
        """Joint least-squares minimizer ``(v, u)`` over the shard."""
        sw = np.sqrt(self.w)[:, None]
        M = np.hstack([sw * self.B, sw * self.A])
        sol = np.linalg.lstsq(M, sw[:, 0] * self.y, rcond=None)[0]
        p = self.spec.personal_dim
        return sol[:p], sol[p:]


def _row_logsumexp(z):
    # scipy.special.logsumexp costs ~10x more on small arrays; this sits in the SGD loop
    top = z.max(axis=1)
    return top + np.log(np.exp(z - top[:, None]).sum(axis=1))


class SoftmaxSplitObjective(LocalObjective):
    """Two-block linear softmax classifier with cross-entropy loss.

    Parameter layouts (matrices flattened row-major):

    ``output``
        shared ``W1`` (hidden x d); personal head ``[W2 (C x hidden), b (C)]``.
    ``input``
        personal ``W1`` (hidden x d); shared head ``[W2 (C x hidden), b (C)]``.
    ``split_input``
        personal ``Wp`` (C x |P|) on the personal feature subset, shared
        ``[Ws (C x |S|), b (C)]`` on the rest; outputs are summed.  An empty
        personal subset gives plain (non-personalized) softmax regression.
    """

    kind = "softmax_split"

    def __init__(self, X, labels, n_classes, strategy="output", hidden=None,
                 personal_features=None, alpha=1.0, sample_weights=None):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        labels = np.asarray(labels).reshape(-1)
        n, d = X.shape
        if n == 0:
            raise InvalidObjectiveError("empty data shard")
        if labels.shape[0] != n:
            raise ContractViolation("X and labels must have the same number of rows")
        if labels.min() < 0 or labels.max() >= n_classes:
            raise ContractViolation("labels must lie in [0, n_classes)")
        if strategy not in STRATEGIES:
            raise ContractViolation(f"unknown strategy {strategy!r}")
        if sample_weights is None:
            sample_weights = np.ones(n)
        w = np.asarray(sample_weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != n or np.any(w < 0):
            raise ContractViolation("sample_weights must be nonnegative, one per row")
        C = int(n_classes)
        self.n_classes, self.hidden, self.n_features = C, hidden, d
        if strategy == "split_input":
            mask = np.zeros(d, dtype=bool)
            if personal_features is not None:
                mask[np.asarray(personal_features, dtype=int)] = True
            self.personal_mask = _frozen(mask, bool)
            n_p = int(mask.sum())
            shared_dim, personal_dim = C * (d - n_p) + C, C * n_p
        else:
            if hidden is None or hidden < 1:
                raise ContractViolation("hidden width required for input/output strategies")
            self.personal_mask = None
            if strategy == "output":
                shared_dim, personal_dim = hidden * d, C * hidden + C
            else:
                shared_dim, personal_dim = C * hidden + C, hidden * d
        super().__init__(SplitSpec(shared_dim, personal_dim, strategy), alpha)
        self.X, self.labels, self.w = _frozen(X), _frozen(labels, np.int64), _frozen(w)
        self._onehot = _frozen(np.eye(C)[self.labels])

    @property
    def n_samples(self):
        return self.X.shape[0]

    def _unpack(self, v, u):
        C, h, d = self.n_classes, self.hidden, self.n_features
        strategy = self.spec.strategy
        if strategy == "output":
            return u.reshape(h, d), v[: C * h].reshape(C, h), v[C * h:]
        if strategy == "input":
            return v.reshape(h, d), u[: C * h].reshape(C, h), u[C * h:]
        n_s = d - int(self.personal_mask.sum())
        return v.reshape(C, d - n_s), u[: C * n_s].reshape(C, n_s), u[C * n_s:]

    def scores(self, v, u, X=None):
        """Class logits for rows of ``X`` (defaults to the training shard)."""
        v, u = self._check(v, u)
        X = self.X if X is None else np.atleast_2d(np.asarray(X, dtype=np.float64))
        P1, P2, b = self._unpack(v, u)
        if self.spec.strategy == "split_input":
            m = self.personal_mask
            return X[:, m] @ P1.T + X[:, ~m] @ P2.T + b
        return (X @ P1.T) @ P2.T + b

    def _batch(self, v, u, idx):
        X, Y, w = self.X[idx], self._onehot[idx], self.w[idx]
        nb = X.shape[0]
        P1, P2, b = self._unpack(v, u)
        if self.spec.strategy == "split_input":
            m = self.personal_mask
            XP, XS = X[:, m], X[:, ~m]
            logits = XP @ P1.T + XS @ P2.T + b
        else:
            H = X @ P1.T
            logits = H @ P2.T + b
        lse = _row_logsumexp(logits)
        ce = lse - np.sum(logits * Y, axis=1)
        loss = float(w @ ce) / nb
        G = (np.exp(logits - lse[:, None]) - Y) * (w / nb)[:, None]
        gb = G.sum(axis=0)
        if self.spec.strategy == "split_input":
            g1, g2 = G.T @ XP, G.T @ XS
        else:
            g2 = G.T @ H
            g1 = (G @ P2).T @ X
        first = g1.ravel()
        head = np.concatenate([g2.ravel(), gb])
        if self.spec.strategy == "output":
            return loss, head, first
        return loss, first, head


def loss_and_grads(obj, v, u):
    """Full-shard loss and partial gradients ``(loss, grad_v, grad_u)``.

    Gradients are of the unweighted ``f_i``; callers apply ``alpha_i``.
    """
    return obj.loss_and_grads(v, u)


def finite_diff_grad(obj, v, u, step=1e-6):
    """Central-difference approximation of both partial gradients."""
    if not step > 0:
        raise ContractViolation("finite-difference step must be positive")
    v, u = obj._check(v, u)

    def partial(x, f):
        g = np.empty_like(x)
        for k in range(x.shape[0]):
            xp, xm = x.copy(), x.copy()
            xp[k] += step
            xm[k] -= step
            g[k] = (f(xp) - f(xm)) / (2.0 * step)
        return g

    gv = partial(v, lambda vv: obj.loss(vv, u))
    gu = partial(u, lambda uu: obj.loss(v, uu))
    return gv, gu


def power_iteration(apply, dim, rng, tol=1e-15, max_iter=20000):
    """Largest eigenvalue of a symmetric PSD operator given as a matvec."""
    if dim == 0:
        return 0.0
    x = rng.standard_normal(dim)
    x /= np.linalg.norm(x)
    lam = 0.0
    stable = 0
    for _ in range(max_iter):
        y = apply(x)
        new = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        x = y / ny
        if abs(new - lam) <= tol * max(abs(new), 1e-300):
            stable += 1
            if stable >= 3:
                return new
        else:
            stable = 0
        lam = new
    return lam


def _nonzero_direction(rng, dim, scale, retries=20):
    for _ in range(retries):
        d = rng.standard_normal(dim) * scale * rng.uniform(0.01, 1.0)
        if np.linalg.norm(d) > 0.0:
            return d
    raise EstimationError("could not draw a nonzero probe displacement")


def lipschitz_ratios(obj, n_pairs, rng, scale=1.0):
    """Difference-quotient ratios ``(r_u, r_v, r_uv, r_vu)`` for random pairs.

    Each row of the returned ``(n_pairs, 4)`` array comes from one base point
    and one displacement in each block.
    """
    p, s = obj.spec.personal_dim, obj.spec.shared_dim
    out = np.zeros((n_pairs, 4))
    for k in range(n_pairs):
        v = rng.standard_normal(p) * scale
        u = rng.standard_normal(s) * scale
        _, gv0, gu0 = obj.loss_and_grads(v, u)
        du = _nonzero_direction(rng, s, scale)
        _, gv_u, gu_u = obj.loss_and_grads(v, u + du)
        nu = np.linalg.norm(du)
        out[k, 0] = np.linalg.norm(gu_u - gu0) / nu
        out[k, 3] = np.linalg.norm(gv_u - gv0) / nu
        if p > 0:
            dv = _nonzero_direction(rng, p, scale)
            _, gv_v, gu_v = obj.loss_and_grads(v + dv, u)
            nv = np.linalg.norm(dv)
            out[k, 1] = np.linalg.norm(gv_v - gv0) / nv
            out[k, 2] = np.linalg.norm(gu_v - gu0) / nv
    return out


def estimate_lipschitz(obj, n_probes=64, seed=0, scale=1.0):
    """Estimate the four gradient-Lipschitz constants of ``obj``.

    Quadratic objectives get exact spectral values.  Other kinds take the
    maximum difference quotient over ``n_probes`` random pairs, inflated by
    :data:`LIPSCHITZ_SAFETY` since sampling underestimates a supremum.
    """
    if n_probes < 2:
        raise ContractViolation("n_probes must be >= 2")
    rng = np.random.default_rng(seed)
    if isinstance(obj, QuadraticObjective):
        return obj.lipschitz(rng)
    ratios = lipschitz_ratios(obj, n_probes, rng, scale)
    if not np.all(np.isfinite(ratios)):
        raise EstimationError("non-finite difference quotient")
    return LipschitzEstimates(*(float(x) for x in LIPSCHITZ_SAFETY * ratios.max(axis=0)))
