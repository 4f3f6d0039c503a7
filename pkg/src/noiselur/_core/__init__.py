"""Kernel dispatch.

Selects the compiled extension when importable, the NumPy fallback
otherwise.  ``NOISELUR_PURE_PYTHON=1`` forces the fallback, which is how
the equivalence tests and the benchmark get at both implementations in
one process (by importing the modules directly).
"""
from __future__ import annotations

import os

import numpy as np

from . import fallback

if os.environ.get("NOISELUR_PURE_PYTHON") == "1":
    _impl = fallback
    HAVE_COMPILED = False
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
        HAVE_COMPILED = True
    except ImportError:
        _impl = fallback
        HAVE_COMPILED = False

IMPLEMENTATION = "compiled" if HAVE_COMPILED else "python"

fit_gbt = _impl.fit_gbt
fit_rf = _impl.fit_rf
predict_forest = _impl.predict_forest
shap_path = _impl.shap_path
enet_cd = _impl.enet_cd
smo_svr = _impl.smo_svr
sample_without_replacement = _impl.sample_without_replacement
bootstrap_weights = _impl.bootstrap_weights


def make_sort_index(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature stable sort order and the matching sorted values.

    Returns ``(sort_idx, XS)``, both ``(d, n)`` and C-contiguous, with
    ``XS[f, i] == X[sort_idx[f, i], f]``.  Computed once per fit; the
    tree kernels sweep these instead of re-sorting per tree.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    order = np.argsort(X, axis=0, kind="stable")
    sort_idx = np.ascontiguousarray(order.T, dtype=np.int32)
    XS = np.ascontiguousarray(np.take_along_axis(X, order, axis=0).T)
    return sort_idx, XS


def as_fit_arrays(X, y=None):
    """Coerce model inputs to the dtypes/layouts the kernels require."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if y is None:
        return X
    y = np.ascontiguousarray(y, dtype=np.float64)
    return X, y
