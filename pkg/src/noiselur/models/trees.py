"""Random-forest and gradient-boosting wrappers over the tree kernels."""

from __future__ import annotations

import numpy as np

from .._core import fit_gbt, fit_rf, make_sort_index, predict_forest


def _empty_forest(base):
    return {
        "feature": np.zeros(0, dtype=np.int32),
        "threshold": np.zeros(0, dtype=np.float64),
        "left": np.zeros(0, dtype=np.int32),
        "right": np.zeros(0, dtype=np.int32),
        "value": np.zeros(0, dtype=np.float64),
        "cover": np.zeros(0, dtype=np.float64),
        "offsets": np.zeros(1, dtype=np.int64),
        "base": float(base),
        "tree_weights": np.zeros(0, dtype=np.float64),
    }


def fit_rf_model(X, y, *, n_trees, mtry, min_node, bootstrap, seed):
    """Bootstrap ensemble of unpruned variance-reduction trees.

    ``min_node`` is the minimum total sample weight a node needs to be
    split further.  The out-of-bag error covers every row left out of at
    least one bootstrap sample.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n = y.shape[0]
    if int(min_node) > n:
        raise ValueError(f"min_node {min_node} exceeds the {n} training rows")
    sort_idx, XS = make_sort_index(X)
    forest, oob_sum, oob_cnt = fit_rf(
        X, sort_idx, XS, y, n_trees=int(n_trees), mtry=int(mtry),
        min_node_weight=float(min_node), bootstrap=bool(bootstrap),
        seed=int(seed))
    seen = oob_cnt > 0
    if bootstrap and seen.any():
        resid = oob_sum[seen] / oob_cnt[seen] - y[seen]
        oob_mse = float((resid @ resid) / seen.sum())
    else:
        oob_mse = None
    return {"forest": forest, "oob_mse": oob_mse}


def fit_gbt_model(X, y, *, learning_rate, max_depth, rounds, subsample,
                  colsample, reg_lambda, reg_gamma, seed):
    """Second-order boosted trees on squared error.

    rounds = 0 is a valid degenerate model that always predicts the
    training mean.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    rounds = int(rounds)
    if rounds == 0:
        base = float(np.cumsum(y)[-1] / y.shape[0])
        return {"forest": _empty_forest(base), "train_mse": np.zeros(0)}
    sort_idx, XS = make_sort_index(X)
    forest, losses, _ = fit_gbt(
        X, sort_idx, XS, y, learning_rate=float(learning_rate),
        max_depth=int(max_depth), rounds_list=[rounds],
        subsample=float(subsample), colsample=float(colsample),
        reg_lambda=float(reg_lambda), reg_gamma=float(reg_gamma),
        seed=int(seed))
    return {"forest": forest, "train_mse": np.asarray(losses)}


def staged_gbt_predictions(X, y, X_val, *, learning_rate, max_depth,
                           rounds_list, subsample, colsample, reg_lambda,
                           reg_gamma, seed):
    """Validation predictions checkpointed at each entry of rounds_list.

    One boosted fit at max(rounds_list) serves every checkpoint because
    each round's tree depends only on the rounds before it.  Returns an
    array of shape (len(rounds_list), len(X_val)).
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    X_val = np.ascontiguousarray(X_val, dtype=np.float64)
    rounds_list = [int(r) for r in rounds_list]
    if rounds_list != sorted(rounds_list) or len(set(rounds_list)) != len(rounds_list):
        raise ValueError("rounds_list must be strictly increasing")
    sort_idx, XS = make_sort_index(X)
    _, _, checkpoints = fit_gbt(
        X, sort_idx, XS, y, learning_rate=float(learning_rate),
        max_depth=int(max_depth), rounds_list=rounds_list,
        subsample=float(subsample), colsample=float(colsample),
        reg_lambda=float(reg_lambda), reg_gamma=float(reg_gamma),
        seed=int(seed), X_val=X_val)
    return checkpoints


def predict_trees(payload, X):
    f = payload["forest"]
    X = np.ascontiguousarray(X, dtype=np.float64)
    return predict_forest(f["feature"], f["threshold"], f["left"],
                          f["right"], f["value"], f["offsets"],
                          f["tree_weights"], f["base"], X)
