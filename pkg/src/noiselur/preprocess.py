"""Yeo-Johnson power transform, standardization and VIF screening.

The transform is fitted column by column on a training matrix and the
fitted parameters are frozen, so the identical mapping can be replayed
on held-out rows without touching their statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "FittedTransform",
    "yeo_johnson",
    "fit_lambda",
    "fit_transform",
    "apply_transform",
    "vif_values",
    "vif_screen",
]

_GOLDEN_RATIO = (np.sqrt(5.0) - 1.0) / 2.0


def yeo_johnson(y, lam):
    """Yeo-Johnson transform of ``y`` at power ``lam``.

    Accepts scalars or arrays.  Piecewise: for y >= 0 it is
    ((y+1)^lam - 1)/lam (log1p(y) at lam = 0); for y < 0 it is
    -((1-y)^(2-lam) - 1)/(2-lam) (-log1p(-y) at lam = 2).  Total and
    strictly increasing in y for any fixed lam.
    """
    arr = np.asarray(y, dtype=np.float64)
    lam = float(lam)
    out = np.empty_like(arr)
    pos = arr >= 0.0
    if pos.any():
        u = np.log1p(arr[pos])
        if lam == 0.0:
            out[pos] = u
        else:
            out[pos] = np.expm1(lam * u) / lam
    neg = ~pos
    if neg.any():
        u = np.log1p(-arr[neg])
        two = 2.0 - lam
        if two == 0.0:
            out[neg] = -u
        else:
            out[neg] = -np.expm1(two * u) / two
    if np.isscalar(y) or arr.ndim == 0:
        return float(out)
    return out


def _profile_loglik(values, jacobian, lam):
    # Gaussian profile log-likelihood of the transformed sample, up to
    # constants: -(n/2) log sigma^2 + (lam - 1) * sum(sign(y) log(|y|+1)).
    with np.errstate(over="ignore", invalid="ignore"):
        psi = yeo_johnson(values, lam)
        if not np.all(np.isfinite(psi)):
            return -np.inf
        var = psi.var()
    if not np.isfinite(var) or var <= 0.0:
        return -np.inf
    n = values.shape[0]
    return -0.5 * n * np.log(var) + (lam - 1.0) * jacobian


def fit_lambda(values, *, lo=-5.0, hi=5.0, grid_size=101, tol=1e-7):
    """Maximum-likelihood Yeo-Johnson power for a 1-d sample.

    Scans a uniform grid on [lo, hi], then sharpens the best bracket by
    golden-section search.  Needs at least three distinct finite values;
    constant input has no information about the power and is rejected.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0 or not np.all(np.isfinite(v)):
        raise ValueError("fit_lambda requires finite values")
    if np.unique(v).size < 3:
        raise ValueError("fit_lambda requires at least 3 distinct values")
    jacobian = float(np.sum(np.sign(v) * np.log1p(np.abs(v))))
    grid = np.linspace(lo, hi, grid_size)
    ll = np.array([_profile_loglik(v, jacobian, lam) for lam in grid])
    best = int(np.argmax(ll))
    a = grid[max(best - 1, 0)]
    b = grid[min(best + 1, grid_size - 1)]
    # golden-section maximization on the bracketing interval
    x1 = b - _GOLDEN_RATIO * (b - a)
    x2 = a + _GOLDEN_RATIO * (b - a)
    f1 = _profile_loglik(v, jacobian, x1)
    f2 = _profile_loglik(v, jacobian, x2)
    while b - a > tol:
        if f1 >= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _GOLDEN_RATIO * (b - a)
            f1 = _profile_loglik(v, jacobian, x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLDEN_RATIO * (b - a)
            f2 = _profile_loglik(v, jacobian, x2)
    return float(0.5 * (a + b))


@dataclass(frozen=True)
class FittedTransform:
    """Frozen per-column Yeo-Johnson powers and post-transform moments."""

    columns: tuple
    lambdas: tuple
    means: tuple
    sds: tuple

    def to_dict(self):
        return {
            "columns": list(self.columns),
            "lambdas": list(self.lambdas),
            "means": list(self.means),
            "sds": list(self.sds),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            columns=tuple(d["columns"]),
            lambdas=tuple(float(x) for x in d["lambdas"]),
            means=tuple(float(x) for x in d["means"]),
            sds=tuple(float(x) for x in d["sds"]),
        )


def fit_transform(X, columns):
    """Fit per-column powers and moments, return (transform, transformed X).

    Training columns come out with mean 0 and standard deviation 1.
    Constant columns carry no scale and must be dropped by the caller
    beforehand.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("expected a 2-d matrix")
    columns = tuple(str(c) for c in columns)
    if len(columns) != X.shape[1]:
        raise ValueError("column list does not match matrix width")
    if not np.all(np.isfinite(X)):
        raise ValueError("matrix contains non-finite values")
    lambdas = []
    means = []
    sds = []
    out = np.empty_like(X)
    for j, name in enumerate(columns):
        col = X[:, j]
        if col.max() == col.min():
            raise ValueError(f"constant column {name!r} cannot be transformed")
        lam = fit_lambda(col)
        psi = yeo_johnson(col, lam)
        mu = float(psi.mean())
        sd = float(psi.std())
        out[:, j] = (psi - mu) / sd
        lambdas.append(float(lam))
        means.append(mu)
        sds.append(sd)
    ft = FittedTransform(columns=columns, lambdas=tuple(lambdas),
                         means=tuple(means), sds=tuple(sds))
    return ft, out


def apply_transform(ft, X, columns):
    """Replay a fitted transform on new rows; no statistics are re-estimated."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    columns = tuple(str(c) for c in columns)
    if columns != ft.columns:
        raise ValueError(
            f"column mismatch: transform was fitted on {list(ft.columns)}, "
            f"got {list(columns)}")
    if X.shape[1] != len(ft.columns):
        raise ValueError("matrix width does not match the fitted transform")
    out = np.empty_like(X)
    for j in range(X.shape[1]):
        psi = yeo_johnson(X[:, j], ft.lambdas[j])
        out[:, j] = (psi - ft.means[j]) / ft.sds[j]
    return out


def _vif_values_regression(X):
    """Per-column OLS fallback; handles exactly collinear matrices."""
    n, d = X.shape
    out = np.empty(d)
    ones = np.ones((n, 1))
    for j in range(d):
        yj = X[:, j]
        ss_tot = float(((yj - yj.mean()) ** 2).sum())
        others = np.hstack([ones, np.delete(X, j, axis=1)])
        coef, _, _, _ = np.linalg.lstsq(others, yj, rcond=None)
        resid = yj - others @ coef
        r2 = 1.0 - float((resid ** 2).sum()) / ss_tot
        if r2 >= 1.0 - 1e-12:
            out[j] = np.inf
        else:
            out[j] = 1.0 / (1.0 - r2)
    return out


def vif_values(X):
    """Variance inflation factor of every column.

    VIF_j = 1/(1 - R^2_j) from the OLS regression of column j on all the
    others plus an intercept; equivalently the j-th diagonal entry of the
    inverse correlation matrix.  An exactly collinear column comes back
    as +inf.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n <= d:
        raise ValueError("VIF needs more rows than columns")
    Z = X - X.mean(axis=0)
    norms = np.sqrt((Z ** 2).sum(axis=0))
    if np.any(norms == 0.0):
        raise ValueError(f"column {int(np.argmin(norms))} is constant")
    Z = Z / norms
    R = Z.T @ Z
    try:
        L = np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        # numerically rank-deficient correlation matrix
        return _vif_values_regression(X)
    Linv = np.linalg.solve(L, np.eye(d))
    out = (Linv ** 2).sum(axis=0)
    out[out >= 1e12] = np.inf
    return out


def vif_screen(X, columns, threshold=10.0):
    """Drop columns until every variance inflation factor is <= threshold.

    One column per pass: the one with the largest VIF (exactly collinear
    columns count as infinite and go first; ties break toward the lowest
    column index).  Returns the retained column names in original order.
    """
    X = np.asarray(X, dtype=np.float64)
    columns = [str(c) for c in columns]
    if len(columns) != X.shape[1]:
        raise ValueError("column list does not match matrix width")
    keep = list(range(X.shape[1]))
    while len(keep) > 1:
        vifs = vif_values(X[:, keep])
        worst = int(np.argmax(vifs))  # argmax takes the first maximum
        if vifs[worst] <= threshold:
            break
        del keep[worst]
    return [columns[i] for i in keep]
