"""Epsilon-insensitive support vector regression with an RBF kernel."""

from __future__ import annotations

import numpy as np

from .._core import smo_svr

DUAL_CAP = 5000


def rbf_kernel(A, B, gamma):
    """exp(-gamma * squared distance) between the rows of A and B."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    sq = (np.einsum("ij,ij->i", A, A)[:, None]
          + np.einsum("ij,ij->i", B, B)[None, :]
          - 2.0 * (A @ B.T))
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-gamma * sq)


def fit_svr_kernel(K, y, C, epsilon, tol=1e-3, max_iter=100_000):
    """Dual solve on a precomputed gram matrix; returns (beta, bias).

    Lets a tuning loop amortize one kernel matrix over many (C, epsilon)
    settings.  Predictions are ``K_cross @ beta + bias`` for the cross
    kernel between new rows and the training rows.
    """
    y = np.ascontiguousarray(y, dtype=np.float64)
    box = np.full(y.shape[0], float(C))
    beta, bias, _, _, _, _ = smo_svr(
        np.ascontiguousarray(K, dtype=np.float64), y, box, float(epsilon),
        float(tol), int(max_iter))
    return beta, float(bias)


def fit_svr(X, y, C, epsilon, gamma, tol=1e-3, max_iter=100_000,
            dual_cap=DUAL_CAP):
    """Solve the SVR dual by pairwise coordinate steps on the kernel matrix.

    The dense kernel matrix bounds the workable training size; past
    ``dual_cap`` rows the caller must subsample instead.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    if n > dual_cap:
        raise ValueError(
            f"SVR dual solver is capped at {dual_cap} rows, got {n}; "
            "subsample the training set")
    K = np.ascontiguousarray(rbf_kernel(X, X, gamma))
    box = np.full(n, float(C))
    beta, bias, iterations, gap, ap, am = smo_svr(
        K, np.ascontiguousarray(y), box, float(epsilon), float(tol),
        int(max_iter))
    sv = np.flatnonzero(beta != 0.0)
    return {
        "sv": np.ascontiguousarray(X[sv]),
        "sv_beta": np.asarray(beta[sv], dtype=np.float64),
        "bias": float(bias),
        "gamma": float(gamma),
        "iterations": int(iterations),
    }


def predict_svr(payload, X):
    X = np.asarray(X, dtype=np.float64)
    sv = payload["sv"]
    if sv.shape[0] == 0:
        return np.full(X.shape[0], payload["bias"])
    K = rbf_kernel(X, sv, payload["gamma"])
    return K @ payload["sv_beta"] + payload["bias"]
