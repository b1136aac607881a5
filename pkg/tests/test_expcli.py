import math
import os
import subprocess
import sys
from dataclasses import fields, replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import accuracy_score, f1_score, roc_auc_score

from fedapm_lab.__main__ import main
from fedapm_lab.errors import ConfigError, ContractViolation
from fedapm_lab.experiment import (CSV_COLUMNS, MetricsRow, RunConfig, emit_csv,
                                   evaluate_metrics, parse_config, parse_csv, run_experiment,
                                   run_single, serialize_config, summarize)

QUAD = dict(problem="quadratic", m=2, shared_dim=3, personal_dim=1, seeds=(0,))


# --- configuration ------------------------------------------------------------------

def test_empty_document_gives_defaults():
    cfg = parse_config("")
    assert cfg == RunConfig()
    assert cfg.fraction == 0.3 and cfg.seeds == tuple(range(20)) and cfg.rounds == 100


def test_round_trip():
    cfg = parse_config('method = "fedapm"\nrho = 0.01\n')
    assert cfg.method == ("fedapm",) and cfg.rho == 0.01
    assert parse_config(serialize_config(cfg)) == cfg


def test_round_trip_of_every_field():
    cfg = RunConfig(method=("fedapm", "fedsim"), seeds=(3, 1), sigma=(0.5, 0.25),
                    personal_features=(1, 2), override=True, rho=0.02, strategy="input")
    assert parse_config(serialize_config(cfg)) == cfg


def test_negative_rho_is_rejected():
    with pytest.raises(ConfigError, match="rho must be positive") as exc:
        parse_config("rho = -1")
    assert exc.value.key == "rho"


@pytest.mark.parametrize("text,key", [("colour = red", "colour"), ("rounds = many", "rounds"),
                                      ("rounds = 0", "rounds"), ("fraction = 1.5", "fraction"),
                                      ("method = fedfoo", "method"), ("override = maybe", "override"),
                                      ("mu = 1", "mu")])
def test_config_errors_name_the_key(text, key):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.key == key
    assert str(exc.value).startswith(key)


def test_comments_and_lists():
    cfg = parse_config("# grid\nmethod = [fedapm, fedavg]  # two\nseeds = 1, 2\n\n")
    assert cfg.method == ("fedapm", "fedavg") and cfg.seeds == (1, 2)


def test_every_field_has_a_default():
    assert all(f.default is not f.default_factory for f in fields(RunConfig))
    RunConfig()


# --- metrics ----------------------------------------------------------------------------

def test_perfect_scores():
    labels = np.array([0, 1, 2, 1, 0])
    assert evaluate_metrics(np.eye(3)[labels], labels) == (1.0, 1.0, 1.0)


def test_constant_predictor():
    labels = np.array([0, 1] * 50)
    m = evaluate_metrics(np.ones((100, 2)), labels)
    assert m.accuracy == 0.5 and m.auc == 0.5


def test_random_scores_have_chance_auc():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 2, 10_000)
    assert abs(evaluate_metrics(rng.random((10_000, 2)), labels).auc - 0.5) <= 0.03


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 20), classes=st.integers(2, 5), ties=st.booleans())
def test_metrics_match_reference_implementation(seed, classes, ties):
    rng = np.random.default_rng(seed)
    n = 60
    labels = np.r_[np.arange(classes), rng.integers(0, classes, n - classes)]
    scores = rng.random((n, classes))
    if ties:
        scores = np.round(scores, 1)
    prob = np.exp(scores) / np.exp(scores).sum(axis=1, keepdims=True)
    m = evaluate_metrics(prob, labels)
    assert m.accuracy == pytest.approx(accuracy_score(labels, np.argmax(prob, axis=1)))
    assert m.f1 == pytest.approx(f1_score(labels, np.argmax(prob, axis=1), average="macro",
                                          zero_division=0))
    ref = np.mean([roc_auc_score(labels == k, prob[:, k]) for k in range(classes)])
    assert m.auc == pytest.approx(ref, rel=1e-12)
    if classes > 2:
        assert m.auc == pytest.approx(roc_auc_score(labels, prob, multi_class="ovr"), rel=1e-12)
    assert 0 <= m.accuracy <= 1 and 0 <= m.f1 <= 1 and 0 <= m.auc <= 1


def test_absent_class_is_excluded_with_a_warning():
    labels = np.array([0, 0, 1, 1])
    scores = np.array([[2, 1, 0], [2, 1, 0], [1, 2, 0], [1, 2, 0]], dtype=float)
    with pytest.warns(UserWarning, match="absent"):
        m = evaluate_metrics(scores, labels)
    assert m == (1.0, 1.0, 1.0)


def test_metric_contracts():
    with pytest.raises(ContractViolation):
        evaluate_metrics(np.ones((3, 2)), [0, 1])
    with pytest.raises(ContractViolation):
        evaluate_metrics(np.ones((2, 2)), [0, 2])


# --- CSV ---------------------------------------------------------------------------------

def row(**kw):
    return MetricsRow(**{"round": 1, "method": "fedapm", "seed": 0, "train_loss": 0.5, **kw})


def test_csv_header_and_sizes():
    assert emit_csv([]) == ",".join(CSV_COLUMNS) + "\n"
    assert emit_csv([]).startswith("round,method,seed,train_loss,accuracy,f1,auc,drift,"
                                   "lagrangian,lyapunov,descent_lhs,descent_rhs,relerr_lhs,"
                                   "relerr_rhs,r1,r2,r3,r4\n")
    assert len(emit_csv([row()]).splitlines()) == 2


def test_csv_rejects_foreign_rows():
    with pytest.raises(ContractViolation):
        emit_csv([row(), {"round": 2}])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(allow_nan=True, allow_infinity=False, width=64), min_size=15,
                max_size=15))
def test_csv_round_trip_to_twelve_digits(values):
    r = MetricsRow(3, "fedsim", 7, *values)
    back = parse_csv(emit_csv([r]))[0]
    assert (back.round, back.method, back.seed) == (3, "fedsim", 7)
    for a, b in zip(values, [getattr(back, c) for c in CSV_COLUMNS[3:]]):
        if math.isnan(a):
            assert math.isnan(b)
        else:
            assert b == pytest.approx(a, rel=5e-12, abs=1e-300)


def test_summary_uses_sample_standard_deviation():
    rows = [row(seed=s, train_loss=x) for s, x in enumerate([1.0, 2.0, 4.0])]
    line = [l for l in summarize(rows).splitlines() if l.startswith("fedapm,train_loss")][0]
    _, _, mean, std, n = line.split(",")
    assert float(mean) == pytest.approx(7 / 3)
    assert float(std) == pytest.approx(np.std([1, 2, 4], ddof=1))
    assert n == "3"


# --- experiments -----------------------------------------------------------------------------

def read(path):
    with open(path, "rb") as fh:
        return fh.read()


def test_one_round_gives_one_row_per_run(tmp_path):
    cfg = RunConfig(method=("fedapm", "fedavg"), rounds=1, out=str(tmp_path), **QUAD)
    res = run_experiment(cfg)
    assert res.exit_code == 0 and len(res.csv_paths) == 2
    for p in res.csv_paths:
        assert len(read(p).decode().splitlines()) == 2
    summary = read(res.summary_path).decode()
    assert "fedapm," in summary and "fedavg," in summary


def test_runs_are_byte_identical(tmp_path):
    base = RunConfig(method=("fedapm", "fedalt"), rounds=3, m=4, classes=3,
                     samples_per_client=30, seeds=(2,), fraction=0.5, rho=0.05, sigma=0.05,
                     override=True, inner_mode="epochs")
    outs = []
    for k, workers in enumerate((1, 3)):
        cfg = replace(base, out=str(tmp_path / str(k)))
        res = run_experiment(cfg, workers=workers)
        outs.append([read(p) for p in res.csv_paths] + [read(res.summary_path)])
    assert outs[0] == outs[1]


def test_classification_rows_are_in_range():
    cfg = RunConfig(method=("fedsim",), rounds=2, m=3, samples_per_client=40, seeds=(0,))
    for r in run_single(cfg, "fedsim", 0):
        assert 0 <= r.accuracy <= 1 and 0 <= r.f1 <= 1 and 0 <= r.auc <= 1
        assert r.drift >= 0


@pytest.mark.filterwarnings("ignore:overflow")
def test_failed_run_is_logged_and_flagged(tmp_path):
    cfg = RunConfig(method=("fedavg", "fedsim"), rounds=5, learning_rate=1e100,
                    out=str(tmp_path), **QUAD)
    res = run_experiment(cfg)
    assert res.exit_code == 1
    assert all(p.endswith(".partial.csv") for p in res.csv_paths)
    assert os.path.exists(tmp_path / "failures.log")
    assert "fedavg seed 0" in read(tmp_path / "failures.log").decode()


# --- command line ------------------------------------------------------------------------------

def write_config(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return str(path)


def test_cli_overrides(tmp_path, capsys):
    path = write_config(tmp_path, "problem = quadratic\nm = 2\nshared_dim = 3\n"
                                  "personal_dim = 1\nseeds = 0, 1\nrounds = 4\n")
    out = tmp_path / "out"
    code = main(["--config", path, "--method", "fedapm,fedprox", "--rounds", "2", "--seed", "5",
                 "--fraction", "1.0", "--out", str(out)])
    assert code == 0
    assert sorted(os.listdir(out)) == ["fedapm_seed5.csv", "fedprox_seed5.csv", "summary.txt"]
    assert len((out / "fedapm_seed5.csv").read_text().splitlines()) == 3


def test_cli_rejects_bad_config(tmp_path, capsys):
    assert main(["--config", write_config(tmp_path, "rho = -1\n")]) == 2
    assert "rho must be positive" in capsys.readouterr().err
    assert main(["--config", str(tmp_path / "missing.cfg")]) == 2


def test_cli_rejects_bad_override(tmp_path):
    path = write_config(tmp_path, "")
    assert main(["--config", path, "--rho", "0"]) == 2
    assert main(["--config", path, "--method", "sgd"]) == 2


def test_module_entry_point(tmp_path):
    path = write_config(tmp_path, "problem = quadratic\nm = 2\nrounds = 1\nseeds = 0\n"
                                  "method = fedavg\n")
    proc = subprocess.run([sys.executable, "-m", "fedapm_lab", "--config", path,
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "o" / "fedavg_seed0.csv").exists()
