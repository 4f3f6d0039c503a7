"""Forward-stepwise least squares and elastic-net regression."""

from __future__ import annotations

import numpy as np

from .._core import enet_cd


def _ols(A, y):
    # returns (coef, rss, rank); A already carries the intercept column
    coef, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    return coef, float(resid @ resid), rank


def fit_lm_forward(X, y, selection_limit):
    """Greedy forward selection with an adjusted-R^2 stopping rule.

    Each step adds the candidate column with the lowest residual sum of
    squares (first one on ties, singular candidates skipped) and keeps it
    only while the adjusted R^2 keeps strictly improving.  The final set
    is refit by ordinary least squares.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    selection_limit = int(selection_limit)
    if n <= selection_limit + 1:
        raise ValueError("need more rows than selection_limit + 1")
    ybar = float(y.mean())
    ss_tot = float(((y - ybar) ** 2).sum())
    ones = np.ones((n, 1))
    selected = []
    best_adj = 0.0  # the intercept-only model
    trace = []
    if ss_tot > 0.0:
        remaining = list(range(d))
        while len(selected) < selection_limit and remaining:
            best_j = -1
            best_rss = np.inf
            for j in remaining:
                A = np.hstack([ones, X[:, selected + [j]]])
                _, rss, rank = _ols(A, y)
                if rank < A.shape[1]:
                    continue  # singular design, candidate unusable
                if rss < best_rss:
                    best_rss = rss
                    best_j = j
            if best_j < 0:
                break
            p = len(selected) + 1
            r2 = 1.0 - best_rss / ss_tot
            adj = 1.0 - (1.0 - r2) * (n - 1) / (n - p - 1)
            if adj <= best_adj:
                break
            selected.append(best_j)
            remaining.remove(best_j)
            best_adj = adj
            trace.append(adj)
    if selected:
        A = np.hstack([ones, X[:, selected]])
        coef, rss, _ = _ols(A, y)
        intercept = float(coef[0])
        weights = coef[1:]
        r2 = 1.0 - rss / ss_tot
    else:
        intercept = ybar
        weights = np.zeros(0)
        r2 = 0.0
    return {
        "term_idx": np.asarray(selected, dtype=np.int64),
        "coef": np.asarray(weights, dtype=np.float64),
        "intercept": intercept,
        "train_r2": float(r2),
        "adjusted_r2": float(best_adj),
        "adjusted_r2_trace": trace,
    }


def fit_enet(X, y, alpha, lam, tol=1e-7, max_sweeps=10_000):
    """Elastic net by cyclic coordinate descent.

    Minimizes (1/2n)||y - Xb - b0||^2 + lam*(alpha*|b|_1 + (1-alpha)/2*|b|_2^2)
    with an unpenalized intercept: columns and y are centered, the
    kernel solves for b and the intercept is recovered from the means.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    colmeans = X.mean(axis=0)
    ybar = float(y.mean())
    Xc = np.ascontiguousarray(X - colmeans)
    beta, sweeps, delta = enet_cd(Xc, np.ascontiguousarray(y - ybar),
                                  float(lam * alpha),
                                  float(lam * (1.0 - alpha)),
                                  float(tol), int(max_sweeps))
    return {
        "term_idx": np.arange(X.shape[1], dtype=np.int64),
        "coef": np.asarray(beta, dtype=np.float64),
        "intercept": float(ybar - colmeans @ beta),
        "sweeps": int(sweeps),
        "last_change": float(delta),
    }


def predict_linear(payload, X):
    X = np.asarray(X, dtype=np.float64)
    idx = np.asarray(payload["term_idx"], dtype=np.int64)
    return payload["intercept"] + X[:, idx] @ payload["coef"]
