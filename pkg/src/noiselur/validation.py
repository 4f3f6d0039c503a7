"""Nested repeated k-fold cross-validation and model comparison.

The outer loop (4 repeats x 10 folds by default) measures generalization;
an inner 10-fold loop over each outer-training set picks hyperparameters.
Preprocessing is fitted inside each training partition only, so no test
row ever influences a transform, a screen, or a fit.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .models import ModelSpec, default_grid, default_hyperparameters, fit_model
from .models.grids import FAMILIES
from .models.linear import fit_enet, fit_lm_forward, predict_linear
from .models.svr import fit_svr_kernel, rbf_kernel
from .models.trees import fit_rf_model, predict_trees, staged_gbt_predictions
from .preprocess import apply_transform, fit_transform, vif_screen
from .rng import derive_seed, substream

_TAG_OUTER = 101
_TAG_INNER = 102
_TAG_FIT = 103

SIGNIFICANCE_LEVEL = 0.05


# ---------------------------------------------------------------------------
# fold plans

@dataclass(frozen=True)
class FoldPlan:
    """Outer repeats x folds plus inner folds over each outer-training set.

    ``outer_test[r][f]`` holds the sorted row indices of one outer test
    fold; ``inner_test[r][f]`` holds the inner test folds, drawn only
    from that fold's outer-training rows.
    """

    n: int
    n_repeats: int
    n_folds: int
    n_inner_folds: int
    seed: int
    outer_test: tuple
    inner_test: tuple

    def outer_split(self, repeat, fold):
        test = self.outer_test[repeat][fold]
        mask = np.ones(self.n, dtype=bool)
        mask[test] = False
        return np.flatnonzero(mask), test

    def inner_splits(self, repeat, fold):
        train, _ = self.outer_split(repeat, fold)
        out = []
        for te in self.inner_test[repeat][fold]:
            mask = np.ones(self.n, dtype=bool)
            mask[self.outer_test[repeat][fold]] = False
            mask[te] = False
            out.append((np.flatnonzero(mask), te))
        assert all(np.isin(te, train).all() for _, te in out)
        return out


def _partition(indices, k, rng):
    perm = indices[rng.permutation(indices.shape[0])]
    return tuple(np.sort(part) for part in np.array_split(perm, k))


def make_fold_plan(n, seed, *, n_repeats=4, n_folds=10, n_inner_folds=10):
    """Deterministic nested fold assignments for n rows."""
    n = int(n)
    if n < 20:
        raise ValueError(f"need at least 20 rows for a fold plan, got {n}")
    outer = []
    inner = []
    all_idx = np.arange(n)
    for r in range(n_repeats):
        rng = substream(seed, _TAG_OUTER, r)
        folds = _partition(all_idx, n_folds, rng)
        outer.append(folds)
        per_fold = []
        for f in range(n_folds):
            train = np.setdiff1d(all_idx, folds[f], assume_unique=True)
            irng = substream(seed, _TAG_INNER, r, f)
            per_fold.append(_partition(train, n_inner_folds, irng))
        inner.append(tuple(per_fold))
    return FoldPlan(n=n, n_repeats=int(n_repeats), n_folds=int(n_folds),
                    n_inner_folds=int(n_inner_folds), seed=int(seed),
                    outer_test=tuple(outer), inner_test=tuple(inner))


# ---------------------------------------------------------------------------
# fit metrics

def _check_pair(y, yhat, min_len=2):
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape[0] != yhat.shape[0]:
        raise ValueError("length mismatch")
    if y.shape[0] < min_len:
        raise ValueError(f"need at least {min_len} values")
    return y, yhat


def rmse(y, yhat):
    y, yhat = _check_pair(y, yhat)
    e = y - yhat
    return float(np.sqrt((e @ e) / e.shape[0]))


def mae(y, yhat):
    y, yhat = _check_pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def r2(y, yhat):
    """Squared Pearson correlation; undefined for constant vectors."""
    y, yhat = _check_pair(y, yhat)
    if y.max() == y.min() or yhat.max() == yhat.min():
        raise ValueError("correlation undefined for constant values")
    c = np.corrcoef(y, yhat)[0, 1]
    return float(c * c)


def r2_ss(y, yhat):
    """1 - SS_res/SS_tot, the skill-score flavor of R squared."""
    y, yhat = _check_pair(y, yhat)
    if y.max() == y.min():
        raise ValueError("SS_tot is zero for constant observations")
    res = y - yhat
    tot = y - y.mean()
    return float(1.0 - (res @ res) / (tot @ tot))


# ---------------------------------------------------------------------------
# rank tests

def _midranks(values):
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.shape[0])
    tie_term = 0.0
    i = 0
    while i < values.shape[0]:
        j = i
        while j + 1 < values.shape[0] \
                and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        t = j - i + 1
        tie_term += t ** 3 - t
        i = j + 1
    return ranks, tie_term


def _exact_rank_sum_p(w, n1, n2):
    # counts[k][s]: subsets of {1..N} of size k with rank sum s
    total_n = n1 + n2
    max_sum = total_n * (total_n + 1) // 2
    counts = [[0] * (max_sum + 1) for _ in range(n1 + 1)]
    counts[0][0] = 1
    for rank in range(1, total_n + 1):
        for k in range(min(n1, rank), 0, -1):
            row, prev = counts[k], counts[k - 1]
            for s in range(max_sum, rank - 1, -1):
                if prev[s - rank]:
                    row[s] += prev[s - rank]
    dist = counts[n1]
    total = math.comb(total_n, n1)
    lo = sum(dist[:w + 1])
    hi = sum(dist[w:])
    return min(1.0, 2.0 * min(lo, hi) / total)


def wilcoxon_rank_sum(a, b):
    """Two-tailed rank-sum p-value.

    Exact enumeration when both sides have <= 10 values and no ties;
    otherwise the normal approximation with midranks, tie correction and
    a continuity correction.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    n1, n2 = a.shape[0], b.shape[0]
    if n1 < 3 or n2 < 3:
        raise ValueError("need at least 3 values per sample")
    comb = np.concatenate([a, b])
    if comb.max() == comb.min():
        return 1.0
    ranks, tie_term = _midranks(comb)
    w = float(ranks[:n1].sum())
    no_ties = np.unique(comb).shape[0] == comb.shape[0]
    if n1 <= 10 and n2 <= 10 and no_ties:
        return _exact_rank_sum_p(int(round(w)), n1, n2)
    total_n = n1 + n2
    mean = n1 * (total_n + 1) / 2.0
    var = (n1 * n2 / 12.0) * ((total_n + 1)
                              - tie_term / (total_n * (total_n - 1)))
    if var <= 0.0:
        return 1.0
    dev = max(abs(w - mean) - 0.5, 0.0)
    z = dev / math.sqrt(var)
    return min(1.0, math.erfc(z / math.sqrt(2.0)))


def benjamini_hochberg(pvals):
    """Step-up adjusted p-values, preserving the input order."""
    p = np.asarray(pvals, dtype=np.float64).ravel()
    if p.size == 0:
        return p.copy()
    if np.any((p < 0.0) | (p > 1.0)) or not np.all(np.isfinite(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.shape[0]
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / (np.arange(m) + 1.0)
    adj = np.minimum(1.0, np.minimum.accumulate(scaled[::-1])[::-1])
    out = np.empty(m)
    out[order] = adj
    return out


# ---------------------------------------------------------------------------
# the nested loop

def _prepare(family, X_tr, names, X_te):
    """Training-only preprocessing; returns transformed train/test blocks."""
    if family in ("RF", "GBT"):
        return X_tr, X_te, list(names), None
    keep = [j for j in range(X_tr.shape[1])
            if X_tr[:, j].max() > X_tr[:, j].min()]
    if not keep:
        raise ValueError("every predictor column is constant")
    kept_names = [names[j] for j in keep]
    Xk_tr, Xk_te = X_tr[:, keep], X_te[:, keep]
    if family == "LM":
        retained = vif_screen(Xk_tr, kept_names)
        ridx = [kept_names.index(c) for c in retained]
        Xk_tr, Xk_te = Xk_tr[:, ridx], Xk_te[:, ridx]
        kept_names = retained
    ft, Xf_tr = fit_transform(Xk_tr, kept_names)
    Xf_te = apply_transform(ft, Xk_te, kept_names)
    return Xf_tr, Xf_te, kept_names, ft


def _fold_rmse(err):
    return float(np.sqrt((err @ err) / err.shape[0]))


def _inner_grid_rmse(family, grid, d, X_tr, names, y_tr, X_te, y_te, seed):
    """RMSE of every grid point on one inner fold, sharing what it can."""
    Xf_tr, Xf_te, _, _ = _prepare(family, X_tr, names, X_te)
    out = np.empty(len(grid))
    if family == "LM":
        for gi, hp in enumerate(grid):
            merged = {**default_hyperparameters(family, d), **hp}
            payload = fit_lm_forward(Xf_tr, y_tr, merged["selection_limit"])
            out[gi] = _fold_rmse(predict_linear(payload, Xf_te) - y_te)
    elif family == "ENET":
        for gi, hp in enumerate(grid):
            merged = {**default_hyperparameters(family, d), **hp}
            payload = fit_enet(Xf_tr, y_tr, merged["alpha"], merged["lam"])
            out[gi] = _fold_rmse(predict_linear(payload, Xf_te) - y_te)
    elif family == "SVR":
        kernels = {}
        for gi, hp in enumerate(grid):
            merged = {**default_hyperparameters(family, d), **hp}
            g = merged["gamma"]
            if g not in kernels:
                kernels[g] = (rbf_kernel(Xf_tr, Xf_tr, g),
                              rbf_kernel(Xf_te, Xf_tr, g))
            K_tr, K_te = kernels[g]
            beta, bias = fit_svr_kernel(K_tr, y_tr, merged["C"],
                                        merged["epsilon"])
            out[gi] = _fold_rmse(K_te @ beta + bias - y_te)
    elif family == "RF":
        for gi, hp in enumerate(grid):
            merged = {**default_hyperparameters(family, d), **hp}
            payload = fit_rf_model(
                Xf_tr, y_tr, n_trees=merged["n_trees"], mtry=merged["mtry"],
                min_node=merged["min_node"], bootstrap=merged["bootstrap"],
                seed=seed)
            out[gi] = _fold_rmse(predict_trees(payload, Xf_te) - y_te)
    else:
        # one staged fit per distinct non-rounds setting covers every
        # rounds value in the grid
        groups = {}
        for gi, hp in enumerate(grid):
            merged = {**default_hyperparameters(family, d), **hp}
            key = (merged["learning_rate"], merged["max_depth"],
                   merged["subsample"], merged["colsample"],
                   merged["reg_lambda"], merged["reg_gamma"])
            groups.setdefault(key, []).append((gi, merged["rounds"]))
        for key, members in groups.items():
            rounds_list = sorted({r for _, r in members})
            lr, md, sub, col, rl, rg = key
            checkpoints = staged_gbt_predictions(
                Xf_tr, y_tr, Xf_te, learning_rate=lr, max_depth=md,
                rounds_list=rounds_list, subsample=sub, colsample=col,
                reg_lambda=rl, reg_gamma=rg, seed=seed)
            for gi, r in members:
                pred = checkpoints[rounds_list.index(r)]
                out[gi] = _fold_rmse(pred - y_te)
    return out


def _evaluate_fold(args):
    (label, family, grid, X, names, y, cities, repeat, fold,
     outer_train, outer_test, inner, fit_seed, inner_seeds) = args
    d = X.shape[1]
    if len(grid) == 1:
        best = 0
    else:
        scores = np.zeros(len(grid))
        for i, (tr, te) in enumerate(inner):
            scores += _inner_grid_rmse(family, grid, d, X[tr], names, y[tr],
                                       X[te], y[te], inner_seeds[i])
        best = int(np.argmin(scores / len(inner)))
    spec = ModelSpec(family=family, hyperparameters=dict(grid[best]),
                     seed=fit_seed)
    trained = fit_model(spec, X[outer_train], names, y[outer_train])
    pred = trained.predict(X[outer_test], names)
    y_te = y[outer_test]
    try:
        fold_r2 = r2(y_te, pred)
    except ValueError:
        fold_r2 = None
    record = {
        "label": label,
        "family": family,
        "repeat": int(repeat),
        "fold": int(fold),
        "n_test": int(outer_test.shape[0]),
        "rmse": rmse(y_te, pred),
        "mae": mae(y_te, pred),
        "r2": fold_r2,
        "r2_ss": r2_ss(y_te, pred),
        "hyperparameters": dict(trained.hyperparameters),
        "transform": None if trained.transform is None
        else trained.transform.to_dict(),
    }
    per_city = []
    fold_cities = [cities[i] for i in outer_test]
    for city in sorted(set(fold_cities)):
        sel = np.array([c == city for c in fold_cities])
        if int(sel.sum()) < 2:
            continue
        per_city.append({
            "label": label, "repeat": int(repeat), "fold": int(fold),
            "city": city, "n": int(sel.sum()),
            "rmse": rmse(y_te[sel], pred[sel]),
            "mae": mae(y_te[sel], pred[sel]),
        })
    return record, per_city


@dataclass
class CVReport:
    """Everything the nested loop measured, ready to serialize."""

    labels: tuple
    families: dict
    seed: int
    n_repeats: int
    n_folds: int
    fold_metrics: list
    per_city: list
    summary: dict = field(default_factory=dict)
    comparison: dict = field(default_factory=dict)
    residual_diagnostics: dict = field(default_factory=dict)

    def fold_rmse_vector(self, label):
        recs = [m for m in self.fold_metrics if m["label"] == label]
        recs.sort(key=lambda m: (m["repeat"], m["fold"]))
        return np.array([m["rmse"] for m in recs])

    def to_dict(self):
        return {
            "format": "noiselur-cv-report",
            "version": 1,
            "labels": list(self.labels),
            "families": dict(self.families),
            "seed": self.seed,
            "n_repeats": self.n_repeats,
            "n_folds": self.n_folds,
            "comparison_unit": "per-fold RMSE vectors, "
                               "rank-sum tested pairwise",
            "fold_metrics": self.fold_metrics,
            "per_city": self.per_city,
            "summary": self.summary,
            "comparison": self.comparison,
            "residual_diagnostics": self.residual_diagnostics,
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format") != "noiselur-cv-report":
            raise ValueError("not a cv report document")
        return cls(labels=tuple(doc["labels"]), families=dict(doc["families"]),
                   seed=doc["seed"], n_repeats=doc["n_repeats"],
                   n_folds=doc["n_folds"], fold_metrics=doc["fold_metrics"],
                   per_city=doc["per_city"], summary=doc["summary"],
                   comparison=doc["comparison"],
                   residual_diagnostics=doc.get("residual_diagnostics", {}))

    def save(self, out_dir):
        """Write the JSON report, two CSV tables and the plot-data CSV."""
        import os
        paths = {
            "json": os.path.join(out_dir, "cv_report.json"),
            "folds": os.path.join(out_dir, "fold_metrics.csv"),
            "pairs": os.path.join(out_dir, "pairwise_tests.csv"),
            "plot": os.path.join(out_dir, "boxplot_data.csv"),
        }
        with open(paths["json"], "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, allow_nan=False)
        with open(paths["folds"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "family", "repeat", "fold", "n_test",
                        "rmse", "mae", "r2", "r2_ss", "hyperparameters"])
            for m in self.fold_metrics:
                w.writerow([m["label"], m["family"], m["repeat"], m["fold"],
                            m["n_test"], repr(m["rmse"]), repr(m["mae"]),
                            "" if m["r2"] is None else repr(m["r2"]),
                            repr(m["r2_ss"]),
                            json.dumps(m["hyperparameters"], sort_keys=True)])
        with open(paths["pairs"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["a", "b", "p_raw", "p_adjusted", "significant"])
            for pair in self.comparison.get("pairs", []):
                w.writerow([pair["a"], pair["b"], repr(pair["p_raw"]),
                            repr(pair["p_adjusted"]),
                            int(pair["significant"])])
        with open(paths["plot"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["family", "metric", "repeat", "fold", "value"])
            for m in self.fold_metrics:
                for metric in ("rmse", "mae", "r2"):
                    if m[metric] is None:
                        continue
                    w.writerow([m["label"], metric.upper(), m["repeat"],
                                m["fold"], repr(m[metric])])
        return paths


def compare_models(report, alpha=SIGNIFICANCE_LEVEL):
    """Winner by mean outer RMSE plus BH-adjusted pairwise rank tests."""
    labels = list(report.labels)
    if len(labels) < 2:
        raise ValueError("model comparison needs at least 2 families")
    vectors = {lab: report.fold_rmse_vector(lab) for lab in labels}
    expected = report.n_repeats * report.n_folds
    for lab, v in vectors.items():
        if v.shape[0] != expected:
            raise ValueError(f"{lab}: expected {expected} fold metrics, "
                             f"got {v.shape[0]}")
    means = {lab: float(np.mean(vectors[lab])) for lab in labels}
    winner = min(labels, key=lambda lab: (means[lab], labels.index(lab)))
    combos = list(itertools.combinations(labels, 2))
    raw = [wilcoxon_rank_sum(vectors[a], vectors[b]) for a, b in combos]
    adjusted = benjamini_hochberg(raw)
    pairs = [{"a": a, "b": b, "p_raw": float(pr), "p_adjusted": float(pa),
              "significant": bool(pa < alpha)}
             for (a, b), pr, pa in zip(combos, raw, adjusted)]
    return {"winner": winner, "alpha": alpha, "mean_rmse": means,
            "pairs": pairs}


def nested_cv(X, columns, y, cities, families, grids, plan, *, threads=1):
    """Run the full nested loop and assemble the report.

    ``families`` is a sequence of family names, or (label, family) pairs
    when one family appears under several labels.  ``grids`` maps labels
    to hyperparameter dicts in tie-break order; missing entries fall back
    to the canonical grid for that family.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    names = tuple(str(c) for c in columns)
    cities = tuple(str(c) for c in cities)
    if X.shape[0] != plan.n or y.shape[0] != plan.n or len(cities) != plan.n:
        raise ValueError("X, y, cities and the fold plan disagree on n")
    if X.shape[1] != len(names):
        raise ValueError("column list does not match matrix width")

    pairs = []
    for item in families:
        label, family = (item, item) if isinstance(item, str) else item
        if family not in FAMILIES:
            raise ValueError(f"unknown model family {family!r}")
        pairs.append((str(label), family))
    labels = [lab for lab, _ in pairs]
    if len(set(labels)) != len(labels):
        raise ValueError("duplicate model labels")

    grids = dict(grids or {})
    resolved = {}
    for label, family in pairs:
        grid = grids.get(label)
        if grid is None:
            grid = default_grid(family, X.shape[1])
        grid = [dict(hp) for hp in grid]
        if not grid:
            raise ValueError(f"{label}: empty hyperparameter grid")
        resolved[label] = grid

    tasks = []
    for label, family in pairs:
        for repeat in range(plan.n_repeats):
            for fold in range(plan.n_folds):
                otr, ote = plan.outer_split(repeat, fold)
                inner = plan.inner_splits(repeat, fold)
                fit_seed = derive_seed(plan.seed, _TAG_FIT, repeat, fold, 0)
                inner_seeds = [
                    derive_seed(plan.seed, _TAG_FIT, repeat, fold, i + 1)
                    for i in range(len(inner))]
                tasks.append((label, family, resolved[label], X, names, y,
                              cities, repeat, fold, otr, ote, inner,
                              fit_seed, inner_seeds))

    if threads > 1:
        with ProcessPoolExecutor(max_workers=int(threads)) as pool:
            results = list(pool.map(_evaluate_fold, tasks, chunksize=1))
    else:
        results = [_evaluate_fold(t) for t in tasks]

    fold_metrics = []
    per_city = []
    for record, city_rows in results:
        fold_metrics.append(record)
        per_city.extend(city_rows)

    report = CVReport(labels=tuple(labels),
                      families={lab: fam for lab, fam in pairs},
                      seed=int(plan.seed), n_repeats=plan.n_repeats,
                      n_folds=plan.n_folds, fold_metrics=fold_metrics,
                      per_city=per_city)
    for lab in labels:
        v = report.fold_rmse_vector(lab)
        r2_vals = [m["r2"] for m in fold_metrics
                   if m["label"] == lab and m["r2"] is not None]
        report.summary[lab] = {
            "mean_rmse": float(np.mean(v)),
            "mean_mae": float(np.mean([m["mae"] for m in fold_metrics
                                       if m["label"] == lab])),
            "mean_r2": float(np.mean(r2_vals)) if r2_vals else None,
            "n_folds": int(v.shape[0]),
        }
    # rank-sum tests need at least 3 folds per model
    if len(labels) >= 2 and plan.n_repeats * plan.n_folds >= 3:
        report.comparison = compare_models(report)
    return report
