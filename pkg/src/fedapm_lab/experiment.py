"""Configuration, experiment orchestration, metrics and CSV output.

A configuration is a flat ``key = value`` text file; ``#`` starts a
comment, lists are comma separated (brackets optional) and strings may be
quoted.  Every key has a default, so an empty file is a valid config::

    method = fedapm, fedavg
    rounds = 50
    seeds = 0, 1, 2
    rho = 0.01
    override = true

Each ``(method, seed)`` pair writes ``<out>/<method>_seed<seed>.csv`` with
one row per round; ``<out>/summary.txt`` holds final-round means and sample
standard deviations (``ddof=1``) across seeds.
"""

from __future__ import annotations

import logging
import math
import os
import traceback
import warnings
from dataclasses import asdict, dataclass, fields, replace
from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata

from .baselines import METHODS as BASELINE_METHODS
from .baselines import BaselineConfig, baseline_round, init_baseline_state
from .datagen import SyntheticSpec, make_classification_problem, make_quadratic_problem
from .diagnostics import (descent_constant, drift_metric, evaluate_point,
                          relerr_constant, trace_row)
from .engine import InnerConfig, init_federation, init_rng, run_round
from .errors import ConfigError, ContractViolation, FedAPMError

log = logging.getLogger(__name__)

METHODS = ("fedapm",) + BASELINE_METHODS
CSV_COLUMNS = ("round", "method", "seed", "train_loss", "accuracy", "f1", "auc", "drift",
               "lagrangian", "lyapunov", "descent_lhs", "descent_rhs", "relerr_lhs",
               "relerr_rhs", "r1", "r2", "r3", "r4")
SUMMARY_METRICS = ("train_loss", "accuracy", "f1", "auc", "drift")
RHO_GRID = (0.001, 0.01, 0.02, 0.05, 0.1)
FRACTION_GRID = (0.1, 0.2, 0.3, 0.5)


# --- configuration ----------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """One experiment grid: methods x seeds on one synthetic problem."""

    method: tuple = ("fedapm",)
    problem: str = "classification"
    rounds: int = 100
    seeds: tuple = tuple(range(20))
    # FedAPM
    rho: object = "auto"
    sigma: object = "auto"
    override: bool = False
    xi0: float = 1.0
    mu: float = 0.5
    dual_init: str = "zero"
    v_tol: float = 1e-8
    v_max_iters: int = 500
    u_max_passes: int = 500
    u_stall_passes: int = 5
    batch_size: int = 32
    inner_mode: str = "theory"
    u_start: str = "local"
    # federation
    fraction: float = 0.3
    alpha_mode: str = "uniform"
    # baselines
    learning_rate: float = 0.1
    local_epochs: int = 3
    prox_weight: float = 0.01
    # classification problem
    m: int = 20
    classes: int = 4
    feature_dim: int = 16
    samples_per_client: int = 200
    concentration: float = 0.5
    heterogeneity: float = 1.0
    class_separation: float = 4.0
    strategy: str = "output"
    hidden: int = 8
    personal_features: tuple = ()
    feature_rotation: float = 0.0
    data_seed: int = -1
    init_scale: float = 0.1
    # quadratic problem
    shared_dim: int = 6
    personal_dim: int = 2
    conditioning: float = 4.0
    coupling: float = 0.5
    out: str = "results"

    def __post_init__(self):
        _validate(self)

    @property
    def inner(self):
        return InnerConfig(v_tol=self.v_tol, v_max_iters=self.v_max_iters,
                           u_max_passes=self.u_max_passes, batch_size=self.batch_size,
                           u_stall_passes=self.u_stall_passes, mode=self.inner_mode,
                           epochs=self.local_epochs, learning_rate=self.learning_rate,
                           u_start=self.u_start)


def _positive(name, x):
    if not x > 0:
        raise ConfigError(name, f"{name} must be positive")


def _validate(cfg):
    for name in cfg.method:
        if name not in METHODS:
            raise ConfigError("method", f"unknown method {name!r}; choose from {', '.join(METHODS)}")
    if not cfg.method:
        raise ConfigError("method", "at least one method required")
    if cfg.problem not in ("classification", "quadratic"):
        raise ConfigError("problem", "must be 'classification' or 'quadratic'")
    if cfg.rounds < 1:
        raise ConfigError("rounds", "rounds must be >= 1")
    if not cfg.seeds:
        raise ConfigError("seeds", "at least one seed required")
    if cfg.rho != "auto":
        _positive("rho", cfg.rho)
    if cfg.sigma != "auto":
        for s in np.atleast_1d(cfg.sigma):
            _positive("sigma", s)
    _positive("xi0", cfg.xi0)
    if not 0 < cfg.mu < 1:
        raise ConfigError("mu", "mu must lie in (0, 1)")
    if not 0 < cfg.fraction <= 1:
        raise ConfigError("fraction", "fraction must lie in (0, 1]")
    if cfg.dual_init not in ("zero", "consistent"):
        raise ConfigError("dual_init", "must be 'zero' or 'consistent'")
    if cfg.inner_mode not in ("theory", "epochs"):
        raise ConfigError("inner_mode", "must be 'theory' or 'epochs'")
    if cfg.u_start not in ("local", "broadcast"):
        raise ConfigError("u_start", "must be 'local' or 'broadcast'")
    if cfg.alpha_mode not in ("uniform", "proportional"):
        raise ConfigError("alpha_mode", "must be 'uniform' or 'proportional'")
    if cfg.strategy not in ("input", "output", "split_input"):
        raise ConfigError("strategy", "must be 'input', 'output' or 'split_input'")
    for name in ("v_max_iters", "u_max_passes", "local_epochs"):
        if getattr(cfg, name) < 0:
            raise ConfigError(name, f"{name} must be >= 0")
    for name in ("u_stall_passes", "batch_size", "m", "classes", "feature_dim",
                 "samples_per_client", "hidden", "shared_dim"):
        if getattr(cfg, name) < 1:
            raise ConfigError(name, f"{name} must be >= 1")
    for name in ("concentration", "class_separation", "learning_rate", "conditioning"):
        _positive(name, getattr(cfg, name))
    for name in ("v_tol", "heterogeneity", "prox_weight", "coupling", "init_scale",
                 "feature_rotation"):
        if getattr(cfg, name) < 0:
            raise ConfigError(name, f"{name} must be >= 0")
    if cfg.personal_dim < 0:
        raise ConfigError("personal_dim", "personal_dim must be >= 0")


def _parse_bool(key, s):
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(key, f"expected a boolean, got {s!r}")


def _parse_scalar(key, s, kind):
    s = s.strip().strip("'\"")
    try:
        if kind is int:
            return int(s)
        if kind is float:
            return float(s)
    except ValueError:
        raise ConfigError(key, f"expected {kind.__name__}, got {s!r}") from None
    if kind is bool:
        return _parse_bool(key, s)
    return s


def _split_list(s):
    s = s.strip()
    if s.startswith("[") and s.endswith("]"):
        s = s[1:-1]
    return [p.strip() for p in s.split(",") if p.strip()]


_FIELDS = {f.name: f for f in fields(RunConfig)}
_LIST_KINDS = {"method": str, "seeds": int, "personal_features": int}


def _parse_value(key, raw):
    default = _FIELDS[key].default
    if key in _LIST_KINDS:
        return tuple(_parse_scalar(key, p, _LIST_KINDS[key]) for p in _split_list(raw))
    if key in ("rho", "sigma"):
        text = raw.strip().strip("'\"")
        if text == "auto":
            return "auto"
        vals = [_parse_scalar(key, p, float) for p in _split_list(text)]
        if key == "rho" or len(vals) == 1:
            if len(vals) != 1:
                raise ConfigError(key, "expected a single number or 'auto'")
            return vals[0]
        return tuple(vals)
    return _parse_scalar(key, raw, type(default))


def parse_config(text):
    """Parse a ``key = value`` document into a :class:`RunConfig`."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(key, "unknown key")
        values[key] = _parse_value(key, raw)
    return RunConfig(**values)


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_config(cfg):
    """Inverse of :func:`parse_config`: one ``key = value`` line per field."""
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in asdict(cfg).items())


def apply_overrides(cfg, method=None, rho=None, rounds=None, seed=None, fraction=None,
                    out=None):
    """Command-line overrides on top of a parsed config."""
    changes = {}
    if method is not None:
        changes["method"] = tuple(_split_list(method))
    if rho is not None:
        changes["rho"] = rho
    if rounds is not None:
        changes["rounds"] = rounds
    if seed is not None:
        changes["seeds"] = (seed,)
    if fraction is not None:
        changes["fraction"] = fraction
    if out is not None:
        changes["out"] = out
    return replace(cfg, **changes)


# --- metrics ----------------------------------------------------------------

class Metrics(NamedTuple):
    accuracy: float
    f1: float
    auc: float


def _ovr_auc(score, positive):
    """Area under the ROC curve via the Mann-Whitney statistic; ties count 1/2."""
    n_pos = int(positive.sum())
    n_neg = positive.shape[0] - n_pos
    ranks = rankdata(score)
    return (ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def evaluate_metrics(scores, labels):
    """Top-1 accuracy, macro-F1 and macro one-vs-rest AUC.

    ``scores`` holds one row of class scores per sample (need not be
    normalized).  Predictions take the first maximal score.  Classes absent
    from ``labels`` are left out of both macro averages with a warning; a
    class with no predicted or true positives has F1 = 0.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.asarray(labels).reshape(-1)
    n, C = scores.shape
    if labels.shape[0] != n:
        raise ContractViolation("one label per score row required")
    if n == 0:
        raise ContractViolation("no samples to evaluate")
    if labels.min() < 0 or labels.max() >= C:
        raise ContractViolation("labels must index the score columns")
    pred = np.argmax(scores, axis=1)
    acc = float(np.mean(pred == labels))
    present = np.unique(labels)
    if present.shape[0] < C:
        missing = sorted(set(range(C)) - set(present.tolist()))
        warnings.warn(f"classes {missing} absent from labels; excluded from macro averages",
                      stacklevel=2)
    f1s, aucs = [], []
    for k in present:
        tp = np.sum((pred == k) & (labels == k))
        denom = np.sum(pred == k) + np.sum(labels == k)
        f1s.append(2.0 * tp / denom if denom else 0.0)
        pos = labels == k
        if pos.all():
            continue
        aucs.append(_ovr_auc(scores[:, k], pos))
    auc = float(np.mean(aucs)) if aucs else math.nan
    return Metrics(acc, float(np.mean(f1s)), auc)


# --- CSV --------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsRow:
    round: int
    method: str
    seed: int
    train_loss: float
    accuracy: float = math.nan
    f1: float = math.nan
    auc: float = math.nan
    drift: float = math.nan
    lagrangian: float = math.nan
    lyapunov: float = math.nan
    descent_lhs: float = math.nan
    descent_rhs: float = math.nan
    relerr_lhs: float = math.nan
    relerr_rhs: float = math.nan
    r1: float = math.nan
    r2: float = math.nan
    r3: float = math.nan
    r4: float = math.nan


def _fmt(x):
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, str):
        return x
    x = float(x)
    return "nan" if math.isnan(x) else f"{x:.12g}"


def emit_csv(rows):
    """Header plus one line per :class:`MetricsRow`, newline terminated."""
    lines = [",".join(CSV_COLUMNS)]
    for r in rows:
        if not isinstance(r, MetricsRow):
            raise ContractViolation(f"expected MetricsRow, got {type(r).__name__}")
        lines.append(",".join(_fmt(getattr(r, c)) for c in CSV_COLUMNS))
    return "\n".join(lines) + "\n"


def parse_csv(text):
    """Read :func:`emit_csv` output back into rows."""
    lines = text.strip("\n").split("\n")
    if tuple(lines[0].split(",")) != CSV_COLUMNS:
        raise ContractViolation("unexpected CSV header")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        rows.append(MetricsRow(int(parts[0]), parts[1], int(parts[2]),
                               *(float(p) for p in parts[3:])))
    return rows


# --- problems and runs --------------------------------------------------------

class Problem(NamedTuple):
    objectives: list
    clients: list | None
    u0: np.ndarray
    v0: np.ndarray


def build_problem(cfg, seed):
    """Synthetic problem and shared initial point for one seed."""
    data_seed = seed if cfg.data_seed < 0 else cfg.data_seed
    if cfg.problem == "quadratic":
        objectives, _ = make_quadratic_problem(
            cfg.m, cfg.shared_dim, cfg.personal_dim, conditioning=cfg.conditioning,
            seed=data_seed, heterogeneity=cfg.heterogeneity, coupling=cfg.coupling)
        s = objectives[0].spec
        return Problem(objectives, None, np.zeros(s.shared_dim), np.zeros(s.personal_dim))
    spec = SyntheticSpec(
        m=cfg.m, classes=cfg.classes, feature_dim=cfg.feature_dim,
        samples_per_client=cfg.samples_per_client,
        dirichlet_concentration=cfg.concentration, heterogeneity=cfg.heterogeneity,
        seed=data_seed, class_separation=cfg.class_separation, strategy=cfg.strategy,
        hidden=cfg.hidden, personal_features=tuple(cfg.personal_features),
        alpha_mode=cfg.alpha_mode, feature_rotation=cfg.feature_rotation)
    prob = make_classification_problem(spec)
    s = prob.objectives[0].spec
    # a zero start is a saddle of the two-layer model
    rng = init_rng(seed)
    u0 = cfg.init_scale * rng.standard_normal(s.shared_dim)
    v0 = cfg.init_scale * rng.standard_normal(s.personal_dim)
    return Problem(prob.objectives, prob.clients, u0, v0)


def held_out_metrics(problem, V, u):
    if problem.clients is None:
        return Metrics(math.nan, math.nan, math.nan)
    scores, labels = [], []
    for obj, cd, v in zip(problem.objectives, problem.clients, V):
        if cd.X_test.shape[0]:
            scores.append(obj.scores(v, u, cd.X_test))
            labels.append(cd.y_test)
    return evaluate_metrics(np.vstack(scores), np.concatenate(labels))


def _fedapm_rows(cfg, problem, seed, workers):
    objs = problem.objectives
    state = init_federation(
        objs, rho=None if cfg.rho == "auto" else cfg.rho,
        sigma=None if cfg.sigma == "auto" else cfg.sigma, seed=seed, xi0=cfg.xi0,
        mu=cfg.mu, fraction=cfg.fraction, u0=problem.u0, v0=problem.v0,
        dual_init=cfg.dual_init, override=cfg.override)
    sig = [c.sigma for c in state.clients]
    a = descent_constant(state.rho, sig)
    b = relerr_constant(state.rho, sig, [c.mu for c in state.clients])
    prev = evaluate_point(state, objs)
    inner = cfg.inner
    for _ in range(cfg.rounds):
        state, info = run_round(state, objs, inner, workers)
        row, prev = trace_row(prev, state, objs, a, b, info)
        met = held_out_metrics(problem, prev.snap.V, prev.snap.u)
        r = row.residuals
        yield MetricsRow(row.round, "fedapm", seed, row.train_loss, *met, row.drift,
                         row.lagrangian, row.lyapunov, row.descent.lhs, row.descent.rhs,
                         row.relerr.lhs, row.relerr.rhs, r.r1, r.r2, r.r3, r.r4)


def _baseline_rows(cfg, problem, seed, method, workers):
    objs = problem.objectives
    bcfg = BaselineConfig(method=method, local_epochs=cfg.local_epochs,
                          learning_rate=cfg.learning_rate,
                          prox_weight=cfg.prox_weight if method == "fedprox" else 0.0,
                          batch_size=cfg.batch_size)
    state = init_baseline_state(objs, seed=seed, fraction=cfg.fraction, u0=problem.u0,
                                v0=problem.v0)
    shared_v = method in ("fedavg", "fedprox")
    for _ in range(cfg.rounds):
        state = baseline_round(state, objs, bcfg, workers)
        V = [state.v_global] * len(objs) if shared_v else [c.v for c in state.clients]
        loss = float(sum(o.alpha * o.loss(v, state.u) for o, v in zip(objs, V)))
        met = held_out_metrics(problem, V, state.u)
        yield MetricsRow(state.round, method, seed, loss, *met,
                         drift_metric([c.u for c in state.clients], state.u))


def run_single(cfg, method, seed, workers=None):
    """All rows of one ``(method, seed)`` run."""
    return list(_iter_rows(cfg, method, seed, workers))


def _iter_rows(cfg, method, seed, workers):
    problem = build_problem(cfg, seed)
    if method == "fedapm":
        return _fedapm_rows(cfg, problem, seed, workers)
    return _baseline_rows(cfg, problem, seed, method, workers)


def summarize(final_rows):
    """``method,metric,mean,std,n`` lines over final-round rows (``ddof=1``)."""
    lines = ["method,metric,mean,std,n"]
    for method in dict.fromkeys(r.method for r in final_rows):
        rows = [r for r in final_rows if r.method == method]
        for metric in SUMMARY_METRICS:
            x = np.array([getattr(r, metric) for r in rows], dtype=np.float64)
            mean = float(np.mean(x))
            std = float(np.std(x, ddof=1)) if x.shape[0] > 1 else math.nan
            lines.append(f"{method},{metric},{_fmt(mean)},{_fmt(std)},{x.shape[0]}")
    return "\n".join(lines) + "\n"


class ExperimentResult(NamedTuple):
    exit_code: int
    csv_paths: list
    summary_path: str | None
    failures: list


def run_experiment(cfg, workers=None):
    """Run every ``(method, seed)`` pair and write CSVs plus the summary.

    A failing run leaves ``<method>_seed<seed>.partial.csv`` with the rows
    completed so far and a traceback in ``failures.log``; the exit code is
    then 1 (0 on full success).
    """
    os.makedirs(cfg.out, exist_ok=True)
    paths, finals, failures = [], [], []
    for method in cfg.method:
        for seed in cfg.seeds:
            rows = []
            path = os.path.join(cfg.out, f"{method}_seed{seed}.csv")
            try:
                for row in _iter_rows(cfg, method, seed, workers):
                    rows.append(row)
            except (FedAPMError, FloatingPointError, ValueError) as exc:
                path = path[:-4] + ".partial.csv"
                failures.append(f"{method} seed {seed}: {exc}\n{traceback.format_exc()}")
                log.error("%s seed %d failed: %s", method, seed, exc)
            else:
                finals.append(rows[-1])
            with open(path, "w", newline="") as fh:
                fh.write(emit_csv(rows))
            paths.append(path)
    fail_path = os.path.join(cfg.out, "failures.log")
    if failures:
        with open(fail_path, "w") as fh:
            fh.write("\n".join(failures))
    elif os.path.exists(fail_path):
        os.remove(fail_path)
    summary_path = os.path.join(cfg.out, "summary.txt")
    with open(summary_path, "w") as fh:
        fh.write(summarize(finals) if finals else "method,metric,mean,std,n\n")
    return ExperimentResult(1 if failures else 0, paths, summary_path, failures)
