"""Five regression learners behind one fit/predict interface.

``fit_model`` owns the per-family preprocessing policy: the linear model
additionally passes a collinearity screen, the elastic net and the SVR
get transformed and standardized predictors, and the tree ensembles take
the matrix as-is.  Whatever was fitted is frozen into the returned
``TrainedModel`` and replayed verbatim at predict time.
"""

from __future__ import annotations

import numpy as np

from ..preprocess import fit_transform, vif_screen
from .base import (
    ARTIFACT_VERSION,
    PREPROCESSING_POLICY,
    ModelSpec,
    TrainedModel,
    validate_hyperparameters,
)
from .grids import (
    FAMILIES,
    default_grid,
    default_hyperparameters,
    rf_mtry_values,
    svr_gamma_values,
)
from .linear import fit_enet, fit_lm_forward
from .svr import fit_svr
from .trees import fit_gbt_model, fit_rf_model, staged_gbt_predictions

__all__ = [
    "ARTIFACT_VERSION",
    "FAMILIES",
    "PREPROCESSING_POLICY",
    "ModelSpec",
    "TrainedModel",
    "default_grid",
    "default_hyperparameters",
    "fit_model",
    "rf_mtry_values",
    "staged_gbt_predictions",
    "svr_gamma_values",
    "validate_hyperparameters",
]


def _nonconstant_columns(X, names):
    keep = [j for j in range(X.shape[1]) if X[:, j].max() > X[:, j].min()]
    if not keep:
        raise ValueError("every predictor column is constant")
    return keep, [names[j] for j in keep]


def fit_model(spec, X, columns, y):
    """Fit one model per its spec and return the trained artifact."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2:
        raise ValueError("expected a 2-d predictor matrix")
    n, d = X.shape
    if y.shape[0] != n:
        raise ValueError("y length does not match the matrix rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite training values")
    names = tuple(str(c) for c in columns)
    if len(names) != d:
        raise ValueError("column list does not match matrix width")
    if len(set(names)) != d:
        raise ValueError("duplicate column names")

    hp = dict(default_hyperparameters(spec.family, d))
    hp.update(spec.hyperparameters)
    validate_hyperparameters(spec.family, hp, n_features=d)

    family = spec.family
    transform = None
    if family in ("RF", "GBT"):
        used_names = names
        Xf = X
    else:
        keep, kept_names = _nonconstant_columns(X, names)
        Xk = X[:, keep]
        if family == "LM":
            retained = vif_screen(Xk, kept_names)
            ridx = [kept_names.index(c) for c in retained]
            Xk = Xk[:, ridx]
            kept_names = retained
        transform, Xf = fit_transform(Xk, kept_names)
        used_names = tuple(kept_names)

    if family == "LM":
        payload = fit_lm_forward(Xf, y, hp["selection_limit"])
    elif family == "ENET":
        payload = fit_enet(Xf, y, hp["alpha"], hp["lam"])
    elif family == "SVR":
        payload = fit_svr(Xf, y, hp["C"], hp["epsilon"], hp["gamma"])
    elif family == "RF":
        payload = fit_rf_model(
            Xf, y, n_trees=hp["n_trees"], mtry=hp["mtry"],
            min_node=hp["min_node"], bootstrap=hp["bootstrap"],
            seed=spec.seed)
    else:
        payload = fit_gbt_model(
            Xf, y, learning_rate=hp["learning_rate"],
            max_depth=hp["max_depth"], rounds=hp["rounds"],
            subsample=hp["subsample"], colsample=hp["colsample"],
            reg_lambda=hp["reg_lambda"], reg_gamma=hp["reg_gamma"],
            seed=spec.seed)

    return TrainedModel(
        family=family,
        hyperparameters=hp,
        seed=int(spec.seed),
        feature_names=names,
        used_names=used_names,
        transform=transform,
        payload=payload,
        n_train=n,
    )
