"""Pure-Python/NumPy model kernels.

Reference implementation of the hot numerical loops: gradient tree
growing (shared by the random forest and the boosting machine), forest
prediction, tree-path Shapley attribution, elastic-net coordinate
descent and the SVR SMO solver.

The compiled extension ``noiselur._core._kernels`` implements the same
functions with the same signatures and is selected automatically when
available.  The two must agree bit for bit, which constrains this module
in non-obvious ways:

* every reduction is accumulated sequentially (``np.cumsum(...)[-1]``
  instead of ``np.sum``, whose pairwise summation rounds differently),
* arithmetic expressions are parenthesised exactly like the C code,
* all random draws run through the same splitmix64 integer chain.
"""
from __future__ import annotations

import numpy as np

from ..rng import MASK64, mix, splitmix64

STREAM_ROWS = 0xB0
STREAM_COLS = 0xC0
STREAM_NODE = 0xF0

_NEG_INF = float("-inf")


# ---------------------------------------------------------------------------
# integer sampling (splitmix64 chain)

def _rand_below(state: int, n: int) -> tuple[int, int]:
    state, z = splitmix64(state)
    return state, ((z >> 32) * n) >> 32


def sample_without_replacement(state: int, n: int, k: int) -> tuple[int, np.ndarray]:
    """First ``k`` entries of a partial Fisher-Yates shuffle of ``0..n-1``."""
    pool = np.arange(n, dtype=np.int32)
    for i in range(k):
        state, r = _rand_below(state, n - i)
        j = i + r
        pool[i], pool[j] = pool[j], pool[i]
    return state, pool[:k].copy()


def bootstrap_weights(state: int, n: int) -> tuple[int, np.ndarray]:
    """Multiplicity weights of ``n`` draws with replacement from ``0..n-1``."""
    w = np.zeros(n, dtype=np.float64)
    for _ in range(n):
        state, j = _rand_below(state, n)
        w[j] += 1.0
    return state, w


def _seq_sum(a: np.ndarray) -> float:
    # cumsum accumulates left to right, matching a C loop bit for bit
    if a.size == 0:
        return 0.0
    return float(np.cumsum(a)[-1])


# ---------------------------------------------------------------------------
# tree growing

def _node_feature_mask(node_rng_base: int, node_id: int, d: int, mtry: int,
                       scratch: np.ndarray) -> np.ndarray:
    state = mix(node_rng_base, node_id)
    pool = scratch
    pool[:] = np.arange(d, dtype=np.int32)
    mask = np.zeros(d, dtype=bool)
    for i in range(mtry):
        state, r = _rand_below(state, d - i)
        j = i + r
        pool[i], pool[j] = pool[j], pool[i]
        mask[pool[i]] = True
    return mask


def grow_tree(XS, sort_idx, X, g, h, node_of_row, reg_lambda, reg_gamma,
              max_depth, min_node_weight, feat_ids, mtry, node_rng_base):
    """Grow one regression tree on gradient/hessian targets, level-wise.

    ``node_of_row`` must arrive as 0 for active rows and -1 for inactive
    ones; on return it holds each active row's leaf id.  Split gain is
    the standard second-order objective reduction; a node becomes a leaf
    when no split has positive gain.  Ties between candidate splits are
    broken toward the lowest feature index, then the lowest threshold.

    Returns local node arrays ``(feature, threshold, left, right, value,
    cover)`` where ``feature < 0`` marks a leaf.
    """
    n, d = X.shape
    active = np.flatnonzero(node_of_row == 0)
    g_root = _seq_sum(g[active])
    h_root = _seq_sum(h[active])

    feat = [-1]
    thr = [0.0]
    left = [-1]
    right = [-1]
    value = [0.0]
    cover = [h_root]
    node_g = [g_root]
    node_h = [h_root]
    node_depth = [0]

    frontier: list[int] = []
    if active.size >= 2 and h_root >= min_node_weight and max_depth > 0:
        frontier.append(0)
    else:
        value[0] = -g_root / (h_root + reg_lambda)

    mtry_scratch = np.empty(d, dtype=np.int32) if mtry > 0 else None

    while frontier:
        m = len(frontier)
        n_nodes = len(feat)
        slot_of = np.full(n_nodes + 1, -1, dtype=np.int64)
        slot_of[np.asarray(frontier)] = np.arange(m)
        # node_of_row == -1 indexes the sentinel last entry, which stays -1

        best_gain = np.full(m, _NEG_INF)
        best_feat = np.full(m, -1, dtype=np.int64)
        best_thr = np.zeros(m)
        best_gl = np.zeros(m)
        best_hl = np.zeros(m)

        fro = np.asarray(frontier)
        g_tot = np.asarray(node_g)[fro]
        h_tot = np.asarray(node_h)[fro]
        base_term = g_tot * g_tot / (h_tot + reg_lambda)

        if mtry > 0:
            masks = np.empty((m, d), dtype=bool)
            for k, nd in enumerate(frontier):
                masks[k] = _node_feature_mask(node_rng_base, nd, d, mtry,
                                              mtry_scratch)

        for f in feat_ids:
            order = sort_idx[f]
            slots = slot_of[node_of_row[order]]
            keep = slots >= 0
            o = order[keep]
            s = slots[keep]
            vv = XS[f][keep]
            grp = np.argsort(s, kind="stable")
            o = o[grp]
            s = s[grp]
            vv = vv[grp]
            bounds = np.searchsorted(s, np.arange(m + 1))
            gsel = g[o]
            hsel = h[o]
            for k in range(m):
                a, b = int(bounds[k]), int(bounds[k + 1])
                if b - a < 2:
                    continue
                if mtry > 0 and not masks[k, f]:
                    continue
                v = vv[a:b]
                boundary = np.flatnonzero(v[:-1] < v[1:])
                if boundary.size == 0:
                    continue
                gc = np.cumsum(gsel[a:b])
                hc = np.cumsum(hsel[a:b])
                gl = gc[boundary]
                hl = hc[boundary]
                gains = (0.5 * (gl * gl / (hl + reg_lambda)
                                + (g_tot[k] - gl) * (g_tot[k] - gl)
                                / (h_tot[k] - hl + reg_lambda)
                                - base_term[k])
                         - reg_gamma)
                j = int(np.argmax(gains))
                if gains[j] > best_gain[k]:
                    i = int(boundary[j])
                    best_gain[k] = gains[j]
                    best_feat[k] = f
                    best_thr[k] = (v[i] + v[i + 1]) / 2.0
                    best_gl[k] = gl[j]
                    best_hl[k] = hl[j]

        # finalize this level: either split a node or freeze it as a leaf
        split_slots = []
        for k, nd in enumerate(frontier):
            if best_gain[k] > 0.0:
                lid = len(feat)
                feat[nd] = int(best_feat[k])
                thr[nd] = float(best_thr[k])
                left[nd] = lid
                right[nd] = lid + 1
                gl, hl = float(best_gl[k]), float(best_hl[k])
                gr = node_g[nd] - gl
                hr = node_h[nd] - hl
                for cg, ch in ((gl, hl), (gr, hr)):
                    feat.append(-1)
                    thr.append(0.0)
                    left.append(-1)
                    right.append(-1)
                    value.append(0.0)
                    cover.append(ch)
                    node_g.append(cg)
                    node_h.append(ch)
                    node_depth.append(node_depth[nd] + 1)
                split_slots.append(k)
            else:
                value[nd] = -node_g[nd] / (node_h[nd] + reg_lambda)

        if not split_slots:
            break

        # route rows of split nodes to their children
        rows = np.flatnonzero(node_of_row >= 0)
        nd_arr = node_of_row[rows]
        feat_arr = np.asarray(feat)
        moved = feat_arr[nd_arr] >= 0
        rows = rows[moved]
        nd_arr = nd_arr[moved]
        f_r = feat_arr[nd_arr]
        go_left = X[rows, f_r] < np.asarray(thr)[nd_arr]
        node_of_row[rows] = np.where(go_left,
                                     np.asarray(left)[nd_arr],
                                     np.asarray(right)[nd_arr])

        counts = np.bincount(node_of_row[node_of_row >= 0],
                             minlength=len(feat))
        new_frontier = []
        for k in split_slots:
            nd = frontier[k]
            for child in (left[nd], right[nd]):
                if (counts[child] >= 2
                        and node_h[child] >= min_node_weight
                        and node_depth[child] < max_depth):
                    new_frontier.append(child)
                else:
                    value[child] = -node_g[child] / (node_h[child] + reg_lambda)
        frontier = new_frontier

    return (np.asarray(feat, dtype=np.int32),
            np.asarray(thr, dtype=np.float64),
            np.asarray(left, dtype=np.int32),
            np.asarray(right, dtype=np.int32),
            np.asarray(value, dtype=np.float64),
            np.asarray(cover, dtype=np.float64))


def _predict_tree(feature, threshold, left, right, value, X, root=0):
    n = X.shape[0]
    idx = np.full(n, root, dtype=np.int64)
    live = feature[idx] >= 0
    while live.any():
        rows = np.flatnonzero(live)
        at = idx[rows]
        f = feature[at]
        go_left = X[rows, f] < threshold[at]
        idx[rows] = np.where(go_left, left[at], right[at])
        live[rows] = feature[idx[rows]] >= 0
    return value[idx]


def _concat_trees(trees):
    offsets = np.zeros(len(trees) + 1, dtype=np.int64)
    for t, tr in enumerate(trees):
        offsets[t + 1] = offsets[t] + tr[0].shape[0]
    feature = np.concatenate([tr[0] for tr in trees])
    threshold = np.concatenate([tr[1] for tr in trees])
    left = np.concatenate([tr[2] for tr in trees])
    right = np.concatenate([tr[3] for tr in trees])
    value = np.concatenate([tr[4] for tr in trees])
    cover = np.concatenate([tr[5] for tr in trees])
    for t in range(len(trees)):
        a, b = offsets[t], offsets[t + 1]
        seg_l = left[a:b]
        seg_r = right[a:b]
        seg_l[seg_l >= 0] += a
        seg_r[seg_r >= 0] += a
    return {"feature": feature.astype(np.int32),
            "threshold": threshold,
            "left": left.astype(np.int32),
            "right": right.astype(np.int32),
            "value": value,
            "cover": cover,
            "offsets": offsets}


# ---------------------------------------------------------------------------
# boosting / forest drivers

def fit_gbt(X, sort_idx, XS, y, *, learning_rate, max_depth, rounds_list,
            subsample, colsample, reg_lambda, reg_gamma, seed, X_val=None):
    """Second-order gradient boosting with squared error.

    Fits ``rounds_list[-1]`` trees and snapshots the validation
    predictions after each checkpoint in ``rounds_list``, which lets one
    fit serve every "number of rounds" grid point at once.  Returns the
    packed forest, the base score, per-round training MSE and the
    checkpot matrix (checkpoints x validation rows).
    """
    n, d = X.shape
    rounds = int(rounds_list[-1])
    base = _seq_sum(y) / n
    pred = np.full(n, base)
    n_val = 0 if X_val is None else X_val.shape[0]
    val_pred = np.full(n_val, base)
    checkpoints = np.empty((len(rounds_list), n_val))
    losses = np.empty(rounds)
    trees = []
    all_feats = np.arange(d, dtype=np.int64)
    k_rows = n if subsample >= 1.0 else max(1, int(subsample * n))
    k_cols = d if colsample >= 1.0 else max(1, int(colsample * d))
    ci = 0
    for t in range(rounds):
        tree_seed = mix(seed, t)
        g = pred - y
        if k_rows < n:
            _, rows = sample_without_replacement(mix(tree_seed, STREAM_ROWS),
                                                 n, k_rows)
            h = np.zeros(n)
            h[rows] = 1.0
            g = np.where(h > 0.0, g, 0.0)
            node_of_row = np.where(h > 0.0, 0, -1).astype(np.int32)
        else:
            h = np.ones(n)
            node_of_row = np.zeros(n, dtype=np.int32)
        if k_cols < d:
            _, cols = sample_without_replacement(mix(tree_seed, STREAM_COLS),
                                                 d, k_cols)
            feats = np.sort(cols).astype(np.int64)
        else:
            feats = all_feats
        tree = grow_tree(XS, sort_idx, X, g, h, node_of_row,
                         reg_lambda, reg_gamma, max_depth, 0.0,
                         feats, 0, 0)
        trees.append(tree)
        inb = node_of_row >= 0
        pred[inb] += learning_rate * tree[4][node_of_row[inb]]
        if not inb.all():
            oob = ~inb
            pred[oob] += learning_rate * _predict_tree(*tree[:5], X[oob])
        resid = pred - y
        losses[t] = _seq_sum(resid * resid) / n
        if n_val:
            val_pred += learning_rate * _predict_tree(*tree[:5], X_val)
        if ci < len(rounds_list) and t + 1 == rounds_list[ci]:
            checkpoints[ci] = val_pred
            ci += 1
    forest = _concat_trees(trees)
    forest["base"] = base
    forest["tree_weights"] = np.full(rounds, learning_rate)
    return forest, losses, checkpoints


def fit_rf(X, sort_idx, XS, y, *, n_trees, mtry, min_node_weight,
           bootstrap, seed):
    """Random forest of unpruned variance-reduction trees.

    With ``g = -w*y`` and ``h = w`` the gradient-tree leaf value
    ``-G/H`` is the weighted mean of ``y`` and the split gain is the
    weighted variance reduction, so the boosting kernel grows these
    trees unchanged.  Returns the packed forest plus out-of-bag
    prediction sums and counts.
    """
    n, d = X.shape
    trees = []
    oob_sum = np.zeros(n)
    oob_cnt = np.zeros(n, dtype=np.int64)
    feats = np.arange(d, dtype=np.int64)
    for t in range(n_trees):
        tree_seed = mix(seed, t)
        if bootstrap:
            _, w = bootstrap_weights(mix(tree_seed, STREAM_ROWS), n)
        else:
            w = np.ones(n)
        g = -w * y
        h = w
        node_of_row = np.where(w > 0.0, 0, -1).astype(np.int32)
        eff_mtry = 0 if mtry >= d else int(mtry)
        tree = grow_tree(XS, sort_idx, X, g, h, node_of_row,
                         0.0, 0.0, 0x7FFFFFFF, float(min_node_weight),
                         feats, eff_mtry, mix(tree_seed, STREAM_NODE))
        trees.append(tree)
        if bootstrap:
            oob = np.flatnonzero(w == 0.0)
            if oob.size:
                oob_sum[oob] += _predict_tree(*tree[:5], X[oob])
                oob_cnt[oob] += 1
    forest = _concat_trees(trees)
    forest["base"] = 0.0
    forest["tree_weights"] = np.full(n_trees, 1.0 / n_trees)
    return forest, oob_sum, oob_cnt


def predict_forest(feature, threshold, left, right, value, offsets,
                   tree_weights, base, X):
    out = np.full(X.shape[0], base)
    for t in range(offsets.shape[0] - 1):
        leaf = _predict_tree(feature, threshold, left, right, value, X,
                             root=int(offsets[t]))
        out += tree_weights[t] * leaf
    return out


# ---------------------------------------------------------------------------
# tree-path Shapley attribution

def _tree_expectation(feature, left, right, value, cover, root):
    acc = 0.0
    stack = [root]
    while stack:
        nd = stack.pop()
        if feature[nd] < 0:
            acc += cover[nd] * value[nd]
        else:
            stack.append(right[nd])
            stack.append(left[nd])
    return acc / cover[root]


class _PathState:
    __slots__ = ("d", "z", "o", "w")

    def __init__(self, size):
        self.d = np.empty(size, dtype=np.int64)
        self.z = np.empty(size)
        self.o = np.empty(size)
        self.w = np.empty(size)


def _extend(p, off, U, pz, po, pi):
    p.d[off + U] = pi
    p.z[off + U] = pz
    p.o[off + U] = po
    p.w[off + U] = 1.0 if U == 0 else 0.0
    for i in range(U - 1, -1, -1):
        p.w[off + i + 1] += po * p.w[off + i] * (i + 1) / (U + 1)
        p.w[off + i] = pz * p.w[off + i] * (U - i) / (U + 1)


def _unwind(p, off, U, idx):
    one = p.o[off + idx]
    zero = p.z[off + idx]
    nxt = p.w[off + U]
    for j in range(U - 1, -1, -1):
        if one != 0.0:
            tmp = p.w[off + j]
            p.w[off + j] = nxt * (U + 1) / ((j + 1) * one)
            nxt = tmp - p.w[off + j] * zero * (U - j) / (U + 1)
        else:
            p.w[off + j] = p.w[off + j] * (U + 1) / (zero * (U - j))
    for j in range(idx, U):
        p.d[off + j] = p.d[off + j + 1]
        p.z[off + j] = p.z[off + j + 1]
        p.o[off + j] = p.o[off + j + 1]


def _unwound_sum(p, off, U, idx):
    one = p.o[off + idx]
    zero = p.z[off + idx]
    nxt = p.w[off + U]
    total = 0.0
    if one != 0.0:
        for j in range(U - 1, -1, -1):
            tmp = nxt * (U + 1) / ((j + 1) * one)
            total += tmp
            nxt = p.w[off + j] - tmp * zero * (U - j) / (U + 1)
    else:
        for j in range(U - 1, -1, -1):
            total += p.w[off + j] * (U + 1) / (zero * (U - j))
    return total


def _shap_recurse(feature, threshold, left, right, value, cover,
                  x, phi, w_tree, p, node, U, poff, pz, po, pi):
    off = poff + U + 1
    for i in range(U + 1):
        p.d[off + i] = p.d[poff + i]
        p.z[off + i] = p.z[poff + i]
        p.o[off + i] = p.o[poff + i]
        p.w[off + i] = p.w[poff + i]
    _extend(p, off, U, pz, po, pi)
    f = feature[node]
    if f < 0:
        for i in range(1, U + 1):
            w = _unwound_sum(p, off, U, i)
            phi[p.d[off + i]] += (w * (p.o[off + i] - p.z[off + i])
                                  * value[node] * w_tree)
        return
    if x[f] < threshold[node]:
        hot, cold = left[node], right[node]
    else:
        hot, cold = right[node], left[node]
    iz = 1.0
    io = 1.0
    path_index = 0
    while path_index <= U:
        if p.d[off + path_index] == f:
            break
        path_index += 1
    if path_index != U + 1:
        iz = p.z[off + path_index]
        io = p.o[off + path_index]
        _unwind(p, off, U, path_index)
        U -= 1
    hot_zero = cover[hot] / cover[node]
    cold_zero = cover[cold] / cover[node]
    _shap_recurse(feature, threshold, left, right, value, cover, x, phi,
                  w_tree, p, hot, U + 1, off, iz * hot_zero, io, f)
    _shap_recurse(feature, threshold, left, right, value, cover, x, phi,
                  w_tree, p, cold, U + 1, off, iz * cold_zero, 0.0, f)


def _tree_max_depth(feature, left, right, root):
    best = 0
    stack = [(root, 0)]
    while stack:
        nd, depth = stack.pop()
        if depth > best:
            best = depth
        if feature[nd] >= 0:
            stack.append((left[nd], depth + 1))
            stack.append((right[nd], depth + 1))
    return best


def shap_path(feature, threshold, left, right, value, cover, offsets,
              tree_weights, X):
    """Per-feature attributions via the path-dependent tree algorithm.

    Covers (training sample weights per node) stand in for background
    conditioning.  Returns ``(phi, expected)`` where ``phi`` has one row
    per input row and ``expected`` is the cover-weighted model mean, so
    ``expected + phi.sum(1)`` equals the raw forest margin.
    """
    n, d = X.shape
    phi = np.zeros((n, d))
    expected = 0.0
    n_trees = offsets.shape[0] - 1
    for t in range(n_trees):
        root = int(offsets[t])
        expected += tree_weights[t] * _tree_expectation(
            feature, left, right, value, cover, root)
        depth = _tree_max_depth(feature, left, right, root)
        size = (depth + 3) * (depth + 4) // 2 + depth + 4
        p = _PathState(size)
        for i in range(n):
            _shap_recurse(feature, threshold, left, right, value, cover,
                          X[i], phi[i], tree_weights[t], p,
                          root, 0, 0, 1.0, 1.0, -1)
    return phi, expected


# ---------------------------------------------------------------------------
# elastic-net coordinate descent

def enet_cd(X, y, l1, l2, tol, max_sweeps):
    """Cyclic coordinate descent for ``(1/2n)||y - Xb||^2 + l1|b| + (l2/2)b^2``.

    ``y`` must already be centred (the intercept is handled by the
    caller).  Stops when the largest absolute coefficient change in a
    full sweep drops below ``tol``.  Returns ``(beta, sweeps, last_max_change)``.
    """
    n, d = X.shape
    beta = np.zeros(d)
    r = y.astype(np.float64).copy()
    cols = [np.ascontiguousarray(X[:, j]) for j in range(d)]
    colnorm = np.empty(d)
    for j in range(d):
        colnorm[j] = _seq_sum(cols[j] * cols[j]) / n
    sweeps = 0
    delta = np.inf
    while sweeps < max_sweeps:
        delta = 0.0
        for j in range(d):
            if colnorm[j] == 0.0:
                continue
            xj = cols[j]
            b_old = beta[j]
            z = _seq_sum(xj * r) / n + colnorm[j] * b_old
            if z > l1:
                b_new = (z - l1) / (colnorm[j] + l2)
            elif z < -l1:
                b_new = (z + l1) / (colnorm[j] + l2)
            else:
                b_new = 0.0
            if b_new != b_old:
                r -= (b_new - b_old) * xj
                beta[j] = b_new
            change = abs(b_new - b_old)
            if change > delta:
                delta = change
        sweeps += 1
        if delta < tol:
            break
    return beta, sweeps, delta


# ---------------------------------------------------------------------------
# SVR sequential minimal optimization

def smo_svr(K, y, C, eps, tol, max_iter):
    """Solve the epsilon-SVR dual on a precomputed kernel matrix.

    Maximal-violating-pair selection over the doubled variable set
    (alpha+, alpha-), each box-constrained by the per-sample ``C``.
    Stops when the KKT violation gap drops below ``tol``; the bias is
    the midpoint of the violation bounds.  Residual overlaps
    ``min(alpha+, alpha-)`` are subtracted at the end so the returned
    multipliers satisfy complementarity exactly.

    Returns ``(beta, b, iterations, gap, alpha_plus, alpha_minus)``.
    """
    n = y.shape[0]
    ap = np.zeros(n)
    am = np.zeros(n)
    F = np.zeros(n)  # K @ beta
    it = 0
    gap = np.inf
    m_up = 0.0
    m_low = 0.0
    while it < max_iter:
        score_p = y - F - eps
        score_m = y - F + eps
        up = np.concatenate([np.where(ap < C, score_p, _NEG_INF),
                             np.where(am > 0.0, score_m, _NEG_INF)])
        low = np.concatenate([np.where(ap > 0.0, score_p, np.inf),
                              np.where(am < C, score_m, np.inf)])
        v1 = int(np.argmax(up))
        v2 = int(np.argmin(low))
        m_up = up[v1]
        m_low = low[v2]
        gap = m_up - m_low
        if gap < tol:
            break
        i1, s1 = (v1, 1.0) if v1 < n else (v1 - n, -1.0)
        i2, s2 = (v2, 1.0) if v2 < n else (v2 - n, -1.0)
        a1 = ap[i1] if s1 > 0 else am[i1]
        a2 = ap[i2] if s2 > 0 else am[i2]
        c1 = C[i1]
        c2 = C[i2]
        # step tau moves s1*a1 up and s2*a2 down by the same amount
        hi1 = c1 - a1 if s1 > 0 else a1
        hi2 = a2 if s2 > 0 else c2 - a2
        hi = hi1 if hi1 < hi2 else hi2
        eta = K[i1, i1] + K[i2, i2] - 2.0 * K[i1, i2]
        lin = m_up - m_low
        if eta > 1e-12:
            tau = lin / eta
            if tau > hi:
                tau = hi
        else:
            tau = hi
        if s1 > 0:
            ap[i1] = a1 + tau
        else:
            am[i1] = a1 - tau
        if s2 > 0:
            ap[i2] = ap[i2] - tau
        else:
            am[i2] = am[i2] + tau
        F += tau * (K[:, i1] - K[:, i2])
        it += 1
    beta = ap - am
    overlap = np.minimum(ap, am)
    ap = ap - overlap
    am = am - overlap
    b = (m_up + m_low) / 2.0
    return beta, b, it, gap, ap, am
