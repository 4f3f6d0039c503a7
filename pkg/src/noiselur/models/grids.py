"""Canonical hyperparameter grids and per-family defaults.

Grid order is part of the contract: tuning ties are broken by the first
grid entry, so every axis is enumerated in the order written here and
the cartesian product runs with the leftmost axis slowest.
"""

from __future__ import annotations

import itertools
import math

FAMILIES = ("LM", "ENET", "SVR", "RF", "GBT")

ENET_ALPHAS = (0.0, 0.25, 0.5, 0.75, 1.0)
ENET_LAMBDAS = tuple(10.0 ** (-4.0 + 5.0 * i / 6.0) for i in range(7))

SVR_C = (0.1, 1.0, 10.0, 100.0)
SVR_EPSILON = (0.1, 0.5, 1.0)

RF_N_TREES = 500
RF_MIN_NODE = (3, 5, 10)

# kept deliberately small: boosting dominates tuning cost, and staged
# evaluation makes the rounds axis nearly free while every other axis
# multiplies the number of full training runs
GBT_LEARNING_RATE = (0.05, 0.1, 0.3)
GBT_MAX_DEPTH = (2, 4)
GBT_ROUNDS = (100, 250, 500)
GBT_SUBSAMPLE = (1.0,)
GBT_REG_LAMBDA = (1.0,)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def rf_mtry_values(n_features: int) -> tuple:
    """The sqrt(d), d/3 and d/2 rules, rounded half-up and clamped to [1, d]."""
    vals = []
    for raw in (math.sqrt(n_features), n_features / 3.0, n_features / 2.0):
        vals.append(max(1, min(n_features, _round_half_up(raw))))
    return tuple(vals)


def svr_gamma_values(n_features: int) -> tuple:
    d = float(n_features)
    return (1.0 / (2.0 * d), 1.0 / d, 2.0 / d)


def default_hyperparameters(family: str, n_features: int) -> dict:
    """A single reasonable setting per family, for untuned fits."""
    if family == "LM":
        return {"selection_limit": 10}
    if family == "ENET":
        return {"alpha": 0.5, "lam": 0.001}
    if family == "SVR":
        return {"C": 1.0, "epsilon": 0.1, "gamma": 1.0 / n_features}
    if family == "RF":
        return {"n_trees": RF_N_TREES, "mtry": rf_mtry_values(n_features)[0],
                "min_node": 5, "bootstrap": True}
    if family == "GBT":
        return {"learning_rate": 0.1, "max_depth": 4, "rounds": 300,
                "subsample": 1.0, "colsample": 1.0,
                "reg_lambda": 1.0, "reg_gamma": 0.0}
    raise ValueError(f"unknown model family {family!r}")


def default_grid(family: str, n_features: int) -> list:
    """Tuning grid for one family, in canonical order, duplicates removed.

    Duplicates only arise when two mtry rules land on the same integer at
    small feature counts; dropping repeats keeps first-entry tie-breaking
    intact because a repeat can never strictly beat its first occurrence.
    """
    if family == "LM":
        grid = [{"selection_limit": 10}]
    elif family == "ENET":
        grid = [{"alpha": a, "lam": l}
                for a, l in itertools.product(ENET_ALPHAS, ENET_LAMBDAS)]
    elif family == "SVR":
        grid = [{"C": c, "epsilon": e, "gamma": g}
                for c, e, g in itertools.product(
                    SVR_C, SVR_EPSILON, svr_gamma_values(n_features))]
    elif family == "RF":
        grid = [{"n_trees": RF_N_TREES, "mtry": m, "min_node": mn,
                 "bootstrap": True}
                for m, mn in itertools.product(
                    rf_mtry_values(n_features), RF_MIN_NODE)]
    elif family == "GBT":
        grid = [{"learning_rate": lr, "max_depth": md, "rounds": r,
                 "subsample": s, "colsample": 1.0,
                 "reg_lambda": rl, "reg_gamma": 0.0}
                for lr, md, r, s, rl in itertools.product(
                    GBT_LEARNING_RATE, GBT_MAX_DEPTH, GBT_ROUNDS,
                    GBT_SUBSAMPLE, GBT_REG_LAMBDA)]
    else:
        raise ValueError(f"unknown model family {family!r}")
    seen = []
    for hp in grid:
        if hp not in seen:
            seen.append(hp)
    return seen
