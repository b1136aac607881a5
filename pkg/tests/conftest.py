import numpy as np
import pytest

from fedapm_lab.numcore import QuadraticObjective, SoftmaxSplitObjective


def random_softmax(seed, n=20, d=4, classes=3, strategy="output", hidden=3,
                   personal_features=(0, 2), alpha=1.0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    y = rng.integers(0, classes, n)
    pf = list(personal_features) if strategy == "split_input" else None
    return SoftmaxSplitObjective(X, y, classes, strategy=strategy, hidden=hidden,
                                 personal_features=pf, alpha=alpha)


def random_quadratic(seed, n=10, s=3, p=2, alpha=1.0):
    rng = np.random.default_rng(seed)
    return QuadraticObjective(rng.standard_normal((n, s)), rng.standard_normal((n, p)),
                              rng.standard_normal(n), alpha=alpha)


def random_point(obj, rng, scale=1.0):
    return (scale * rng.standard_normal(obj.spec.personal_dim),
            scale * rng.standard_normal(obj.spec.shared_dim))


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the test session
CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for k in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[k])
