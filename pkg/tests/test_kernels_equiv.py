"""The compiled kernels and the NumPy fallback must agree bit for bit."""

import os
import subprocess
import sys

import numpy as np
import pytest

from noiselur._core import fallback, make_sort_index

_kernels = pytest.importorskip(
    "noiselur._core._kernels",
    reason="compiled extension not built; nothing to compare against")


def forest_equal(a, b):
    assert set(a) == set(b)
    for key in a:
        x, y = a[key], b[key]
        if isinstance(x, np.ndarray):
            np.testing.assert_array_equal(x, y, err_msg=key)
        else:
            assert x == y, key


def problem(seed, n, d):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = X[:, 0] - 2.0 * X[:, 1] ** 2 + rng.normal(scale=0.3, size=n)
    return X, y


class TestSampling:
    @pytest.mark.parametrize("state,n,k", [(1, 10, 3), (99, 50, 50),
                                           (7, 200, 17)])
    def test_without_replacement(self, state, n, k):
        sa, pa = fallback.sample_without_replacement(state, n, k)
        sb, pb = _kernels.sample_without_replacement(state, n, k)
        assert sa == sb
        np.testing.assert_array_equal(pa, pb)
        assert len(set(pa.tolist())) == k

    @pytest.mark.parametrize("state,n", [(1, 5), (12345, 64), (2, 111)])
    def test_bootstrap(self, state, n):
        sa, wa = fallback.bootstrap_weights(state, n)
        sb, wb = _kernels.bootstrap_weights(state, n)
        assert sa == sb
        np.testing.assert_array_equal(wa, wb)
        assert wa.sum() == n


class TestTrees:
    def test_gbt_bitwise(self):
        X, y = problem(3, 80, 6)
        X_val = problem(4, 20, 6)[0]
        sort_idx, XS = make_sort_index(X)
        kw = dict(learning_rate=0.1, max_depth=3, rounds_list=[10, 25],
                  subsample=0.8, colsample=0.8, reg_lambda=1.0,
                  reg_gamma=0.1, seed=42, X_val=X_val)
        fa, la, ca = fallback.fit_gbt(X, sort_idx, XS, y, **kw)
        fb, lb, cb = _kernels.fit_gbt(X, sort_idx, XS, y, **kw)
        forest_equal(fa, fb)
        np.testing.assert_array_equal(la, lb)
        np.testing.assert_array_equal(ca, cb)

    def test_rf_bitwise(self):
        X, y = problem(5, 60, 5)
        sort_idx, XS = make_sort_index(X)
        kw = dict(n_trees=20, mtry=2, min_node_weight=5.0,
                  bootstrap=True, seed=9)
        fa, sa, na = fallback.fit_rf(X, sort_idx, XS, y, **kw)
        fb, sb, nb = _kernels.fit_rf(X, sort_idx, XS, y, **kw)
        forest_equal(fa, fb)
        np.testing.assert_array_equal(sa, sb)
        np.testing.assert_array_equal(na, nb)

    def test_predict_bitwise(self):
        X, y = problem(6, 70, 4)
        sort_idx, XS = make_sort_index(X)
        forest, _, _ = fallback.fit_gbt(
            X, sort_idx, XS, y, learning_rate=0.3, max_depth=2,
            rounds_list=[15], subsample=1.0, colsample=1.0,
            reg_lambda=1.0, reg_gamma=0.0, seed=1, X_val=None)
        args = (forest["feature"], forest["threshold"], forest["left"],
                forest["right"], forest["value"], forest["offsets"],
                forest["tree_weights"], forest["base"])
        Xq = problem(7, 33, 4)[0]
        np.testing.assert_array_equal(
            fallback.predict_forest(*args, Xq),
            _kernels.predict_forest(*args, Xq))

    def test_shap_bitwise(self):
        X, y = problem(8, 50, 5)
        sort_idx, XS = make_sort_index(X)
        forest, _, _ = fallback.fit_rf(
            X, sort_idx, XS, y, n_trees=12, mtry=3, min_node_weight=3.0,
            bootstrap=True, seed=11)
        args = (forest["feature"], forest["threshold"], forest["left"],
                forest["right"], forest["value"], forest["cover"],
                forest["offsets"], forest["tree_weights"])
        pa, ea = fallback.shap_path(*args, X[:20])
        pb, eb = _kernels.shap_path(*args, X[:20])
        assert ea == eb
        np.testing.assert_array_equal(pa, pb)


class TestSolvers:
    def test_enet_bitwise(self):
        rng = np.random.default_rng(21)
        X = rng.normal(size=(100, 8))
        X = (X - X.mean(0)) / X.std(0)
        y = X @ rng.normal(size=8)
        y -= y.mean()
        a = fallback.enet_cd(X, y, 0.1, 0.05, 1e-9, 1000)
        b = _kernels.enet_cd(X, y, 0.1, 0.05, 1e-9, 1000)
        np.testing.assert_array_equal(a[0], b[0])
        assert a[1] == b[1]
        assert a[2] == b[2]

    def test_svr_bitwise(self):
        rng = np.random.default_rng(31)
        X = rng.normal(size=(30, 3))
        y = np.sin(X[:, 0]) + 0.1 * rng.normal(size=30)
        sq = ((X[:, None, :] - X[None, :, :]) ** 2).sum(-1)
        K = np.exp(-0.5 * sq)
        C = np.full(30, 1.0)
        a = fallback.smo_svr(K, y, C, 0.1, 1e-3, 10000)
        b = _kernels.smo_svr(K, y, C, 0.1, 1e-3, 10000)
        for u, v in zip(a, b):
            if isinstance(u, np.ndarray):
                np.testing.assert_array_equal(u, v)
            else:
                assert u == v


class TestDispatch:
    def test_compiled_backend_selected_here(self):
        from noiselur import _core
        if os.environ.get("NOISELUR_PURE_PYTHON") == "1":
            assert _core.IMPLEMENTATION == "python"
        else:
            assert _core.IMPLEMENTATION == "compiled"

    def test_env_var_forces_fallback(self):
        code = ("import noiselur._core as c; "
                "print(c.IMPLEMENTATION, c.HAVE_COMPILED)")
        env = dict(os.environ, NOISELUR_PURE_PYTHON="1")
        out = subprocess.run([sys.executable, "-c", code], env=env,
                             capture_output=True, text=True, check=True)
        assert out.stdout.split() == ["python", "False"]
