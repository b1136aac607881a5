"""Effect of the penalty rho and of the client fraction on FedAPM.

Training loss of FedAPM after each round on ``configs/cifar_like.cfg`` for
the penalty grid {0.001, 0.01, 0.02, 0.05, 0.1} and the fraction grid
{0.1, 0.2, 0.3, 0.5}.  Smaller penalties let clients fit their own data
between rounds; larger fractions average more clients per round.

    python demos/penalty_sweep.py [rounds] [n_seeds]
"""

import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from fedapm_lab.experiment import FRACTION_GRID, RHO_GRID, parse_config, run_single

ROOT = Path(__file__).resolve().parents[1]


def curve(cfg):
    runs = [[r.train_loss for r in run_single(cfg, "fedapm", s)] for s in cfg.seeds]
    return np.mean(runs, axis=0)


def show(label, loss, marks):
    print(f"{label:>14} " + " ".join(f"{loss[t - 1]:8.4f}" for t in marks))


def main(rounds=50, n_seeds=2):
    base = replace(parse_config((ROOT / "configs" / "cifar_like.cfg").read_text()),
                   rounds=rounds, seeds=tuple(range(n_seeds)))
    marks = [t for t in (1, 5, 10, 25, 50, 100) if t <= rounds]
    print(f"{'round':>14} " + " ".join(f"{t:8d}" for t in marks))
    for rho in RHO_GRID:
        show(f"rho={rho}", curve(replace(base, rho=rho)), marks)
    for fraction in FRACTION_GRID:
        show(f"fraction={fraction}", curve(replace(base, fraction=fraction)), marks)


if __name__ == "__main__":
    args = [int(a) for a in sys.argv[1:3]]
    main(*args)
