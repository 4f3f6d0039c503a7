"""Shapley-value attributions for trained models.

Tree ensembles get the exact polynomial-time path algorithm; everything
else (and every correctness check) can fall back to direct enumeration
over feature coalitions, which is exponential and therefore capped at a
small feature count.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from ._core import shap_path
from .models.base import TrainedModel


@dataclass(frozen=True)
class ShapMatrix:
    """Per-observation, per-feature attributions in dB(A).

    ``base_value + values[i].sum()`` reproduces the model prediction for
    row i (local accuracy).  Raw feature values ride along because the
    downstream plot data needs them.
    """

    base_value: float
    values: np.ndarray
    feature_names: tuple
    feature_values: np.ndarray
    row_ids: tuple
    cities: tuple

    def __post_init__(self):
        n, d = self.values.shape
        if self.feature_values.shape != (n, d):
            raise ValueError("attribution and feature shapes differ")
        if len(self.feature_names) != d:
            raise ValueError("feature name count does not match columns")
        if len(self.row_ids) != n or len(self.cities) != n:
            raise ValueError("row id / city count does not match rows")
        if not (np.all(np.isfinite(self.values))
                and math.isfinite(self.base_value)):
            raise ValueError("non-finite attribution values")

    @property
    def predictions(self):
        return self.base_value + self.values.sum(axis=1)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["row_id", "city"] + list(self.feature_names))
            for rid, city, row in zip(self.row_ids, self.cities,
                                      self.values):
                w.writerow([rid, city] + [repr(float(v)) for v in row])

    def meta_dict(self):
        return {
            "base_value": self.base_value,
            "feature_names": list(self.feature_names),
            "n_obs": len(self.row_ids),
        }


def _aligned(model, X, columns):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("expected a 2-d matrix")
    if columns is None:
        if X.shape[1] != len(model.feature_names):
            raise ValueError("matrix width does not match the model")
        return np.ascontiguousarray(X)
    pos = {c: j for j, c in enumerate(columns)}
    take = []
    for name in model.feature_names:
        if name not in pos:
            raise ValueError(f"missing predictor column {name!r}")
        take.append(pos[name])
    return np.ascontiguousarray(X[:, take])


def tree_shap(model, X, columns=None, background=None, row_ids=None,
              cities=None):
    """Exact attributions for a tree ensemble via the path algorithm.

    Conditioning uses the per-node training covers stored in the model,
    so the training set itself is the reference distribution; the
    ``background`` argument is accepted for interface symmetry with
    ``enumerate_shapley`` and is not consulted.
    """
    if not isinstance(model, TrainedModel) or model.family not in ("RF",
                                                                   "GBT"):
        raise ValueError(
            "tree_shap handles RF and GBT ensembles only; use "
            "enumerate_shapley for other model families (small feature "
            "counts only)")
    del background
    Xa = _aligned(model, X, columns)
    f = model.payload["forest"]
    phi, expected = shap_path(f["feature"], f["threshold"], f["left"],
                              f["right"], f["value"], f["cover"],
                              f["offsets"], f["tree_weights"], Xa)
    n = Xa.shape[0]
    if row_ids is None:
        row_ids = tuple(str(i) for i in range(n))
    if cities is None:
        cities = ("",) * n
    return ShapMatrix(
        base_value=float(f["base"] + expected),
        values=phi,
        feature_names=tuple(model.feature_names),
        feature_values=Xa,
        row_ids=tuple(str(r) for r in row_ids),
        cities=tuple(str(c) for c in cities),
    )


def enumerate_shapley(model, x, background, feature_subset_limit=12):
    """Exact Shapley values by enumerating every feature coalition.

    The value of a coalition S is the mean model output over the
    background rows with the features in S overridden by ``x``
    (interventional value function).  Cost grows as 2^d, hence the limit.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    bg = np.asarray(background, dtype=np.float64)
    if bg.ndim != 2 or bg.shape[1] != x.shape[0]:
        raise ValueError("background must be (n_rows, n_features)")
    d = x.shape[0]
    if d > feature_subset_limit:
        raise ValueError(
            f"{d} features exceed the enumeration limit "
            f"{feature_subset_limit}")
    if isinstance(model, TrainedModel):
        def predict(M):
            return model.predict(M, model.feature_names)
    else:
        predict = model
    n_b = bg.shape[0]
    n_masks = 1 << d
    # one batched predict over every (coalition, background row) pair
    stacked = np.empty((n_masks * n_b, d))
    for mask in range(n_masks):
        block = bg.copy()
        for j in range(d):
            if mask >> j & 1:
                block[:, j] = x[j]
        stacked[mask * n_b:(mask + 1) * n_b] = block
    preds = np.asarray(predict(stacked), dtype=np.float64)
    v = preds.reshape(n_masks, n_b).mean(axis=1)
    fact = [math.factorial(k) for k in range(d + 1)]
    weight = [fact[s] * fact[d - s - 1] / fact[d] for s in range(d)]
    phi = np.zeros(d)
    for mask in range(n_masks):
        s = bin(mask).count("1")
        for j in range(d):
            if not mask >> j & 1:
                phi[j] += weight[s] * (v[mask | 1 << j] - v[mask])
    return phi


def importance_ranking(shap, group_by="none", top_k=8):
    """Features ordered by global mean absolute attribution.

    Ties break toward the lexically smaller name.  ``group_by="city"``
    adds per-city means to every record.
    """
    if shap.values.shape[0] == 0:
        raise ValueError("empty attribution matrix")
    if group_by not in ("none", "city"):
        raise ValueError(f"unknown grouping {group_by!r}")
    mean_abs = np.abs(shap.values).mean(axis=0)
    order = sorted(range(len(shap.feature_names)),
                   key=lambda j: (-mean_abs[j], shap.feature_names[j]))
    records = []
    for rank, j in enumerate(order[:top_k], start=1):
        rec = {"rank": rank, "feature": shap.feature_names[j],
               "mean_abs_shap": float(mean_abs[j])}
        if group_by == "city":
            per_city = {}
            for city in sorted(set(shap.cities)):
                sel = np.array([c == city for c in shap.cities])
                per_city[city] = float(np.abs(shap.values[sel, j]).mean())
            rec["per_city"] = per_city
        records.append(rec)
    return records


def beeswarm_data(shap):
    """Long-format plot records with min-max normalized feature values."""
    n, d = shap.values.shape
    norm = np.empty((n, d))
    for j in range(d):
        col = shap.feature_values[:, j]
        lo, hi = col.min(), col.max()
        norm[:, j] = 0.5 if hi == lo else (col - lo) / (hi - lo)
    records = []
    for i in range(n):
        for j in range(d):
            records.append({
                "row_id": shap.row_ids[i],
                "city": shap.cities[i],
                "feature": shap.feature_names[j],
                "shap": float(shap.values[i, j]),
                "normalized_value": float(norm[i, j]),
            })
    return records


def dependence_data(shap, feature):
    """(raw value, attribution) pairs for one feature, sorted by value."""
    if feature not in shap.feature_names:
        raise ValueError(f"unknown feature {feature!r}")
    j = shap.feature_names.index(feature)
    rows = [{"value": float(shap.feature_values[i, j]),
             "shap": float(shap.values[i, j]),
             "row_id": shap.row_ids[i],
             "city": shap.cities[i]}
            for i in range(shap.values.shape[0])]
    rows.sort(key=lambda r: r["value"])
    return rows


def write_records_csv(records, path, fields):
    """Flat CSV dump of list-of-dict records in a fixed field order."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for rec in records:
            row = []
            for f in fields:
                v = rec.get(f, "")
                row.append(repr(float(v)) if isinstance(v, float) else v)
            w.writerow(row)
