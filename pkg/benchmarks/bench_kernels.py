"""Timing comparison between the compiled kernels and the NumPy fallback.

Runs each hot kernel on a representative workload with both
implementations, checks that the outputs agree exactly, and prints a
table of wall times.  Usage::

    python benchmarks/bench_kernels.py [--repeat 3] [--scale 1.0]
"""

import argparse
import time

import numpy as np

from noiselur._core import fallback, make_sort_index

try:
    from noiselur._core import _kernels
except ImportError:
    _kernels = None


def _best_of(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _flatten(result):
    if isinstance(result, dict):
        return [v for _, v in sorted(result.items())]
    if isinstance(result, tuple):
        flat = []
        for item in result:
            flat.extend(_flatten(item))
        return flat
    return [result]


def _agree(a, b):
    for x, y in zip(_flatten(a), _flatten(b)):
        if isinstance(x, np.ndarray):
            if not np.array_equal(x, y):
                return False
        elif x != y:
            return False
    return True


def workloads(scale):
    rng = np.random.default_rng(17)
    n = int(400 * scale)
    d = 30
    X = rng.normal(size=(n, d))
    y = X[:, 0] - 2.0 * np.abs(X[:, 1]) + rng.normal(scale=0.5, size=n)
    sort_idx, XS = make_sort_index(X)

    gbt_kw = dict(learning_rate=0.1, max_depth=3,
                  rounds_list=[int(200 * scale)], subsample=0.8,
                  colsample=0.8, reg_lambda=1.0, reg_gamma=0.0, seed=5,
                  X_val=None)
    rf_kw = dict(n_trees=int(100 * scale), mtry=10, min_node_weight=5.0,
                 bootstrap=True, seed=5)

    forest, _, _ = fallback.fit_rf(X, sort_idx, XS, y, **rf_kw)
    shap_args = (forest["feature"], forest["threshold"], forest["left"],
                 forest["right"], forest["value"], forest["cover"],
                 forest["offsets"], forest["tree_weights"])
    pred_args = shap_args[:5] + (forest["offsets"],
                                 forest["tree_weights"], forest["base"])
    Xq = rng.normal(size=(int(5000 * scale), d))

    Xe = rng.normal(size=(int(500 * scale), 50))
    Xe = (Xe - Xe.mean(0)) / Xe.std(0)
    ye = Xe @ rng.normal(size=50) + rng.normal(size=Xe.shape[0])
    ye = ye - ye.mean()

    ns = int(200 * scale)
    Xs = rng.normal(size=(ns, 5))
    ys = np.sin(Xs[:, 0]) + 0.1 * rng.normal(size=ns)
    K = np.exp(-0.5 * ((Xs[:, None, :] - Xs[None, :, :]) ** 2).sum(-1))
    C = np.full(ns, 1.0)

    return [
        ("fit_gbt", lambda impl: impl.fit_gbt(X, sort_idx, XS, y,
                                              **gbt_kw)),
        ("fit_rf", lambda impl: impl.fit_rf(X, sort_idx, XS, y, **rf_kw)),
        ("predict_forest",
         lambda impl: impl.predict_forest(*pred_args, Xq)),
        ("shap_path",
         lambda impl: impl.shap_path(*shap_args, X[:int(25 * scale)])),
        ("enet_cd", lambda impl: impl.enet_cd(Xe, ye, 0.05, 0.01, 1e-8,
                                              500)),
        ("smo_svr", lambda impl: impl.smo_svr(K, ys, C, 0.1, 1e-3,
                                              200000)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3,
                    help="take the best of this many runs (default 3)")
    ap.add_argument("--scale", type=float, default=1.0,
                    help="workload size multiplier (default 1.0)")
    args = ap.parse_args()

    if _kernels is None:
        print("compiled extension is not available; build it first "
              "(pip install -e .)")
        return 1

    print(f"{'kernel':<16} {'python':>10} {'compiled':>10} "
          f"{'speedup':>8}  agree")
    for name, call in workloads(args.scale):
        t_py, out_py = _best_of(lambda: call(fallback), args.repeat)
        t_c, out_c = _best_of(lambda: call(_kernels), args.repeat)
        ok = _agree(out_py, out_c)
        print(f"{name:<16} {t_py * 1e3:>8.1f}ms {t_c * 1e3:>8.1f}ms "
              f"{t_py / t_c:>7.1f}x  {'yes' if ok else 'NO'}")
        if not ok:
            return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
