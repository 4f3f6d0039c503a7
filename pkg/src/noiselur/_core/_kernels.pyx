# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled model kernels.

Mirror of ``noiselur._core.fallback`` with identical semantics: the two
implementations must return bit-identical results.  Reductions here run
as plain sequential loops, which is why the fallback uses ``cumsum``
rather than pairwise-summing ``np.sum``; the build also disables FP
contraction so no fused multiply-add can sneak in a different rounding.
"""
import numpy as np

STREAM_ROWS = 0xB0
STREAM_COLS = 0xC0
STREAM_NODE = 0xF0

cdef unsigned long long _GOLDEN = <unsigned long long>0x9E3779B97F4A7C15
cdef unsigned long long _MIXMUL = <unsigned long long>0xD1342543DE82EF95
cdef unsigned long long _M1 = <unsigned long long>0xBF58476D1CE4E5B9
cdef unsigned long long _M2 = <unsigned long long>0x94D049BB133111EB
cdef double _NEG_INF = float("-inf")
cdef double _POS_INF = float("inf")


# ---------------------------------------------------------------------------
# splitmix64 chain

cdef inline unsigned long long _sm_next(unsigned long long *state) noexcept nogil:
    cdef unsigned long long z
    state[0] = state[0] + _GOLDEN
    z = state[0]
    z = (z ^ (z >> 30)) * _M1
    z = (z ^ (z >> 27)) * _M2
    return z ^ (z >> 31)


cdef inline unsigned long long _mix(unsigned long long a, unsigned long long b) noexcept nogil:
    cdef unsigned long long state = a ^ (b * _MIXMUL)
    return _sm_next(&state)


cdef inline unsigned long long _rand_below(unsigned long long *state, unsigned long long n) noexcept nogil:
    return ((_sm_next(state) >> 32) * n) >> 32


cdef void _sample_wor(unsigned long long state, int n, int k, int[::1] pool) noexcept nogil:
    cdef int i, j
    for i in range(n):
        pool[i] = i
    for i in range(k):
        j = i + <int>_rand_below(&state, <unsigned long long>(n - i))
        pool[i], pool[j] = pool[j], pool[i]


cdef void _bootstrap(unsigned long long state, int n, double[::1] w) noexcept nogil:
    cdef int i, j
    for i in range(n):
        w[i] = 0.0
    for i in range(n):
        j = <int>_rand_below(&state, <unsigned long long>n)
        w[j] += 1.0


def sample_without_replacement(state, int n, int k):
    """First ``k`` entries of a partial Fisher-Yates shuffle of ``0..n-1``."""
    cdef unsigned long long st = <unsigned long long>(state & 0xFFFFFFFFFFFFFFFF)
    cdef unsigned long long r
    cdef int i, j
    pool_arr = np.arange(n, dtype=np.int32)
    cdef int[::1] pool = pool_arr
    for i in range(k):
        r = _rand_below(&st, <unsigned long long>(n - i))
        j = i + <int>r
        pool[i], pool[j] = pool[j], pool[i]
    return int(st), pool_arr[:k].copy()


def bootstrap_weights(state, int n):
    """Multiplicity weights of ``n`` draws with replacement from ``0..n-1``."""
    cdef unsigned long long st = <unsigned long long>(state & 0xFFFFFFFFFFFFFFFF)
    w_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] w = w_arr
    cdef int i, j
    for i in range(n):
        j = <int>_rand_below(&st, <unsigned long long>n)
        w[j] += 1.0
    return int(st), w_arr


# ---------------------------------------------------------------------------
# tree growing

cdef inline double _predict_row(int[::1] feat, double[::1] thr, int[::1] left,
                                int[::1] right, double[::1] val,
                                double[:, ::1] X, Py_ssize_t irow, int root) noexcept nogil:
    cdef int nd = root
    while feat[nd] >= 0:
        if X[irow, feat[nd]] < thr[nd]:
            nd = left[nd]
        else:
            nd = right[nd]
    return val[nd]


cdef int _grow_tree(double[:, ::1] XS, int[:, ::1] sort_idx, double[:, ::1] X,
                    double[::1] g, double[::1] h, int[::1] node_of_row,
                    double reg_lambda, double reg_gamma, int max_depth,
                    double min_node_weight, long[::1] feat_ids, int mtry,
                    unsigned long long node_rng_base,
                    int[::1] o_feat, double[::1] o_thr, int[::1] o_left,
                    int[::1] o_right, double[::1] o_val, double[::1] o_cov,
                    int base,
                    double[::1] node_g, double[::1] node_h, int[::1] node_depth,
                    int[::1] slot_of, int[::1] frontier, int[::1] new_frontier,
                    int[::1] counts,
                    double[::1] best_gain, long[::1] best_feat, double[::1] best_thr,
                    double[::1] best_gl, double[::1] best_hl,
                    double[::1] base_term, double[::1] gl_run, double[::1] hl_run,
                    double[::1] prev_val, unsigned char[::1] started,
                    int[::1] mtry_pool) except -1:
    """Grow one tree into the output arrays at ``base``; returns node count.

    Scratch buffers are caller-provided so repeated calls do not
    allocate.  ``node_of_row`` ends up holding tree-local leaf ids for
    active rows; ``o_left``/``o_right`` hold global (base-shifted) ids.
    """
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    cdef Py_ssize_t n_feats = feat_ids.shape[0]
    cdef int n_nodes = 1
    cdef int m, k, nd, lid, f_i, child, first_new, n_new
    cdef long f
    cdef Py_ssize_t i, row
    cdef double g_root = 0.0, h_root = 0.0
    cdef int n_active = 0
    cdef double v, gl, hl, gain, gt, ht, gr, hr
    cdef unsigned long long nstate
    cdef unsigned char[:, ::1] masks = None

    for i in range(n):
        if node_of_row[i] == 0:
            g_root = g_root + g[i]
            h_root = h_root + h[i]
            n_active += 1

    o_feat[base] = -1
    o_thr[base] = 0.0
    o_left[base] = -1
    o_right[base] = -1
    o_val[base] = 0.0
    o_cov[base] = h_root
    node_g[0] = g_root
    node_h[0] = h_root
    node_depth[0] = 0

    cdef int m_cur = 0
    if n_active >= 2 and h_root >= min_node_weight and max_depth > 0:
        frontier[0] = 0
        m_cur = 1
    else:
        o_val[base] = -g_root / (h_root + reg_lambda)
        return 1

    masks_arr = None
    while m_cur > 0:
        m = m_cur
        for k in range(m):
            slot_of[frontier[k]] = k
            gt = node_g[frontier[k]]
            ht = node_h[frontier[k]]
            base_term[k] = gt * gt / (ht + reg_lambda)
            best_gain[k] = _NEG_INF
            best_feat[k] = -1
            best_thr[k] = 0.0
            best_gl[k] = 0.0
            best_hl[k] = 0.0

        if mtry > 0:
            masks_arr = np.zeros((m, d), dtype=np.uint8)
            masks = masks_arr
            for k in range(m):
                nstate = _mix(node_rng_base, <unsigned long long>frontier[k])
                for i in range(d):
                    mtry_pool[i] = <int>i
                for i in range(mtry):
                    lid = <int>i + <int>_rand_below(&nstate, <unsigned long long>(d - i))
                    mtry_pool[i], mtry_pool[lid] = mtry_pool[lid], mtry_pool[i]
                    masks[k, mtry_pool[i]] = 1

        for f_i in range(n_feats):
            f = feat_ids[f_i]
            for k in range(m):
                gl_run[k] = 0.0
                hl_run[k] = 0.0
                started[k] = 0
            for i in range(n):
                row = sort_idx[f, i]
                nd = node_of_row[row]
                if nd < 0:
                    continue
                k = slot_of[nd]
                if k < 0:
                    continue
                if mtry > 0 and masks[k, f] == 0:
                    continue
                v = XS[f, i]
                if started[k] == 1 and v > prev_val[k]:
                    gl = gl_run[k]
                    hl = hl_run[k]
                    gt = node_g[nd]
                    ht = node_h[nd]
                    gain = (0.5 * (gl * gl / (hl + reg_lambda)
                                   + (gt - gl) * (gt - gl)
                                   / (ht - hl + reg_lambda)
                                   - base_term[k])
                            - reg_gamma)
                    if gain > best_gain[k]:
                        best_gain[k] = gain
                        best_feat[k] = f
                        best_thr[k] = (prev_val[k] + v) / 2.0
                        best_gl[k] = gl
                        best_hl[k] = hl
                gl_run[k] = gl_run[k] + g[row]
                hl_run[k] = hl_run[k] + h[row]
                prev_val[k] = v
                started[k] = 1

        # finalize the level
        first_new = n_nodes
        n_new = 0
        for k in range(m):
            nd = frontier[k]
            if best_gain[k] > 0.0:
                lid = n_nodes
                o_feat[base + nd] = <int>best_feat[k]
                o_thr[base + nd] = best_thr[k]
                o_left[base + nd] = base + lid
                o_right[base + nd] = base + lid + 1
                gl = best_gl[k]
                hl = best_hl[k]
                gr = node_g[nd] - gl
                hr = node_h[nd] - hl
                o_feat[base + lid] = -1
                o_thr[base + lid] = 0.0
                o_left[base + lid] = -1
                o_right[base + lid] = -1
                o_val[base + lid] = 0.0
                o_cov[base + lid] = hl
                node_g[lid] = gl
                node_h[lid] = hl
                node_depth[lid] = node_depth[nd] + 1
                o_feat[base + lid + 1] = -1
                o_thr[base + lid + 1] = 0.0
                o_left[base + lid + 1] = -1
                o_right[base + lid + 1] = -1
                o_val[base + lid + 1] = 0.0
                o_cov[base + lid + 1] = hr
                node_g[lid + 1] = gr
                node_h[lid + 1] = hr
                node_depth[lid + 1] = node_depth[nd] + 1
                n_nodes += 2
                n_new += 2
            else:
                o_val[base + nd] = -node_g[nd] / (node_h[nd] + reg_lambda)

        if n_new == 0:
            for k in range(m):
                slot_of[frontier[k]] = -1
            break

        # route rows of split nodes to their children
        for i in range(n):
            nd = node_of_row[i]
            if nd < 0:
                continue
            if o_feat[base + nd] < 0:
                continue
            if X[i, o_feat[base + nd]] < o_thr[base + nd]:
                node_of_row[i] = o_left[base + nd] - base
            else:
                node_of_row[i] = o_right[base + nd] - base

        for child in range(first_new, n_nodes):
            counts[child] = 0
        for i in range(n):
            nd = node_of_row[i]
            if nd >= first_new:
                counts[nd] += 1

        n_new = 0
        for k in range(m):
            nd = frontier[k]
            slot_of[nd] = -1
            if o_feat[base + nd] >= 0:
                child = o_left[base + nd] - base
                if (counts[child] >= 2 and node_h[child] >= min_node_weight
                        and node_depth[child] < max_depth):
                    new_frontier[n_new] = child
                    n_new += 1
                else:
                    o_val[base + child] = -node_g[child] / (node_h[child] + reg_lambda)
                child = o_right[base + nd] - base
                if (counts[child] >= 2 and node_h[child] >= min_node_weight
                        and node_depth[child] < max_depth):
                    new_frontier[n_new] = child
                    n_new += 1
                else:
                    o_val[base + child] = -node_g[child] / (node_h[child] + reg_lambda)
        for k in range(n_new):
            frontier[k] = new_frontier[k]
        m_cur = n_new

    return n_nodes


def fit_gbt(X, sort_idx, XS, y, *, double learning_rate, int max_depth,
            rounds_list, double subsample, double colsample,
            double reg_lambda, double reg_gamma, seed, X_val=None):
    """Second-order gradient boosting with squared error.

    Same contract as the fallback: fits ``rounds_list[-1]`` trees,
    snapshots validation predictions at each checkpoint, returns the
    packed forest, per-round training MSE and the checkpoint matrix.
    """
    cdef double[:, ::1] Xv = X
    cdef int[:, ::1] siv = sort_idx
    cdef double[:, ::1] XSv = XS
    cdef double[::1] yv = y
    cdef unsigned long long sd = <unsigned long long>(seed & 0xFFFFFFFFFFFFFFFF)
    cdef Py_ssize_t n = Xv.shape[0]
    cdef Py_ssize_t d = Xv.shape[1]
    rl = np.asarray(rounds_list, dtype=np.int64)
    cdef long[::1] rlv = rl
    cdef int rounds = <int>rl[-1]
    cdef int cap
    if max_depth >= 30:
        cap = <int>(2 * n + 2)
    else:
        cap = min(<int>(2 * n + 2), (1 << (max_depth + 1)) + 1)

    cdef int k_rows = <int>n if subsample >= 1.0 else max(1, <int>(subsample * n))
    cdef int k_cols = <int>d if colsample >= 1.0 else max(1, <int>(colsample * d))

    feature_arr = np.empty(rounds * cap, dtype=np.int32)
    thr_arr = np.empty(rounds * cap, dtype=np.float64)
    left_arr = np.empty(rounds * cap, dtype=np.int32)
    right_arr = np.empty(rounds * cap, dtype=np.int32)
    val_arr = np.empty(rounds * cap, dtype=np.float64)
    cov_arr = np.empty(rounds * cap, dtype=np.float64)
    offsets_arr = np.zeros(rounds + 1, dtype=np.int64)
    losses_arr = np.empty(rounds, dtype=np.float64)
    cdef int[::1] o_feat = feature_arr
    cdef double[::1] o_thr = thr_arr
    cdef int[::1] o_left = left_arr
    cdef int[::1] o_right = right_arr
    cdef double[::1] o_val = val_arr
    cdef double[::1] o_cov = cov_arr
    cdef long[::1] offsets = offsets_arr
    cdef double[::1] losses = losses_arr

    if X_val is None:
        X_val = np.empty((0, d), dtype=np.float64)
    cdef double[:, ::1] XVv = X_val
    cdef Py_ssize_t n_val = XVv.shape[0]
    checkpoints_arr = np.empty((rl.shape[0], n_val), dtype=np.float64)
    cdef double[:, ::1] checkpoints = checkpoints_arr

    # per-fit scratch
    node_g = np.empty(cap, dtype=np.float64)
    node_h = np.empty(cap, dtype=np.float64)
    node_depth = np.empty(cap, dtype=np.int32)
    slot_of = np.full(cap + 1, -1, dtype=np.int32)
    frontier = np.empty(cap, dtype=np.int32)
    new_frontier = np.empty(cap, dtype=np.int32)
    counts = np.empty(cap, dtype=np.int32)
    best_gain = np.empty(cap, dtype=np.float64)
    best_feat = np.empty(cap, dtype=np.int64)
    best_thr = np.empty(cap, dtype=np.float64)
    best_gl = np.empty(cap, dtype=np.float64)
    best_hl = np.empty(cap, dtype=np.float64)
    base_term = np.empty(cap, dtype=np.float64)
    gl_run = np.empty(cap, dtype=np.float64)
    hl_run = np.empty(cap, dtype=np.float64)
    prev_val = np.empty(cap, dtype=np.float64)
    started = np.empty(cap, dtype=np.uint8)
    mtry_pool = np.empty(d, dtype=np.int32)

    g_arr = np.empty(n, dtype=np.float64)
    h_arr = np.empty(n, dtype=np.float64)
    nor_arr = np.empty(n, dtype=np.int32)
    rowsel = np.empty(n, dtype=np.int32)
    colsel = np.empty(d, dtype=np.int32)
    cdef double[::1] g = g_arr
    cdef double[::1] hh = h_arr
    cdef int[::1] node_of_row = nor_arr
    cdef int[::1] rowselv = rowsel
    cdef int[::1] colselv = colsel

    all_feats = np.arange(d, dtype=np.int64)
    cdef long[::1] feats_all = all_feats
    feats_sub_arr = np.empty(d, dtype=np.int64)
    cdef long[::1] feats_sub = feats_sub_arr

    pred_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] pred = pred_arr
    val_pred_arr = np.empty(n_val, dtype=np.float64)
    cdef double[::1] val_pred = val_pred_arr

    cdef double base_score = 0.0
    cdef Py_ssize_t i
    cdef int t, j, nn, ci = 0
    cdef double acc, rr, lv
    cdef unsigned long long tree_seed
    cdef long[::1] feats_use

    for i in range(n):
        base_score = base_score + yv[i]
    base_score = base_score / n
    for i in range(n):
        pred[i] = base_score
    for i in range(n_val):
        val_pred[i] = base_score

    for t in range(rounds):
        tree_seed = _mix(sd, <unsigned long long>t)
        if k_rows < <int>n:
            _sample_wor(_mix(tree_seed, <unsigned long long>STREAM_ROWS),
                        <int>n, k_rows, rowselv)
            for i in range(n):
                hh[i] = 0.0
            for j in range(k_rows):
                hh[rowselv[j]] = 1.0
            for i in range(n):
                if hh[i] > 0.0:
                    g[i] = pred[i] - yv[i]
                    node_of_row[i] = 0
                else:
                    g[i] = 0.0
                    node_of_row[i] = -1
        else:
            for i in range(n):
                hh[i] = 1.0
                g[i] = pred[i] - yv[i]
                node_of_row[i] = 0
        if k_cols < <int>d:
            _sample_wor(_mix(tree_seed, <unsigned long long>STREAM_COLS),
                        <int>d, k_cols, colselv)
            tmp = np.sort(np.asarray(colsel[:k_cols])).astype(np.int64)
            feats_sub_arr[:k_cols] = tmp
            feats_use = feats_sub[:k_cols]
        else:
            feats_use = feats_all

        nn = _grow_tree(XSv, siv, Xv, g, hh, node_of_row,
                        reg_lambda, reg_gamma, max_depth, 0.0,
                        feats_use, 0, 0,
                        o_feat, o_thr, o_left, o_right, o_val, o_cov,
                        <int>offsets[t],
                        node_g, node_h, node_depth, slot_of, frontier,
                        new_frontier, counts, best_gain, best_feat, best_thr,
                        best_gl, best_hl, base_term, gl_run, hl_run,
                        prev_val, started, mtry_pool)
        offsets[t + 1] = offsets[t] + nn

        acc = 0.0
        for i in range(n):
            if node_of_row[i] >= 0:
                pred[i] = pred[i] + learning_rate * o_val[offsets[t] + node_of_row[i]]
            else:
                lv = _predict_row(o_feat, o_thr, o_left, o_right, o_val,
                                  Xv, i, <int>offsets[t])
                pred[i] = pred[i] + learning_rate * lv
            rr = pred[i] - yv[i]
            acc = acc + rr * rr
        losses[t] = acc / n

        for i in range(n_val):
            lv = _predict_row(o_feat, o_thr, o_left, o_right, o_val,
                              XVv, i, <int>offsets[t])
            val_pred[i] = val_pred[i] + learning_rate * lv
        if ci < rlv.shape[0] and t + 1 == rlv[ci]:
            for i in range(n_val):
                checkpoints[ci, i] = val_pred[i]
            ci += 1

    total = int(offsets_arr[rounds])
    forest = {"feature": feature_arr[:total].copy(),
              "threshold": thr_arr[:total].copy(),
              "left": left_arr[:total].copy(),
              "right": right_arr[:total].copy(),
              "value": val_arr[:total].copy(),
              "cover": cov_arr[:total].copy(),
              "offsets": offsets_arr,
              "base": float(base_score),
              "tree_weights": np.full(rounds, learning_rate)}
    return forest, losses_arr, checkpoints_arr


def fit_rf(X, sort_idx, XS, y, *, int n_trees, int mtry,
           double min_node_weight, bint bootstrap, seed):
    """Random forest of unpruned variance-reduction trees (see fallback)."""
    cdef double[:, ::1] Xv = X
    cdef int[:, ::1] siv = sort_idx
    cdef double[:, ::1] XSv = XS
    cdef double[::1] yv = y
    cdef unsigned long long sd = <unsigned long long>(seed & 0xFFFFFFFFFFFFFFFF)
    cdef Py_ssize_t n = Xv.shape[0]
    cdef Py_ssize_t d = Xv.shape[1]
    cdef int cap = <int>(2 * n + 2)
    cdef int eff_mtry = 0 if mtry >= <int>d else mtry

    feature_arr = np.empty(n_trees * cap, dtype=np.int32)
    thr_arr = np.empty(n_trees * cap, dtype=np.float64)
    left_arr = np.empty(n_trees * cap, dtype=np.int32)
    right_arr = np.empty(n_trees * cap, dtype=np.int32)
    val_arr = np.empty(n_trees * cap, dtype=np.float64)
    cov_arr = np.empty(n_trees * cap, dtype=np.float64)
    offsets_arr = np.zeros(n_trees + 1, dtype=np.int64)
    cdef int[::1] o_feat = feature_arr
    cdef double[::1] o_thr = thr_arr
    cdef int[::1] o_left = left_arr
    cdef int[::1] o_right = right_arr
    cdef double[::1] o_val = val_arr
    cdef double[::1] o_cov = cov_arr
    cdef long[::1] offsets = offsets_arr

    node_g = np.empty(cap, dtype=np.float64)
    node_h = np.empty(cap, dtype=np.float64)
    node_depth = np.empty(cap, dtype=np.int32)
    slot_of = np.full(cap + 1, -1, dtype=np.int32)
    frontier = np.empty(cap, dtype=np.int32)
    new_frontier = np.empty(cap, dtype=np.int32)
    counts = np.empty(cap, dtype=np.int32)
    best_gain = np.empty(cap, dtype=np.float64)
    best_feat = np.empty(cap, dtype=np.int64)
    best_thr = np.empty(cap, dtype=np.float64)
    best_gl = np.empty(cap, dtype=np.float64)
    best_hl = np.empty(cap, dtype=np.float64)
    base_term = np.empty(cap, dtype=np.float64)
    gl_run = np.empty(cap, dtype=np.float64)
    hl_run = np.empty(cap, dtype=np.float64)
    prev_val = np.empty(cap, dtype=np.float64)
    started = np.empty(cap, dtype=np.uint8)
    mtry_pool = np.empty(d, dtype=np.int32)

    g_arr = np.empty(n, dtype=np.float64)
    w_arr = np.empty(n, dtype=np.float64)
    nor_arr = np.empty(n, dtype=np.int32)
    cdef double[::1] g = g_arr
    cdef double[::1] w = w_arr
    cdef int[::1] node_of_row = nor_arr
    all_feats = np.arange(d, dtype=np.int64)
    cdef long[::1] feats_all = all_feats

    oob_sum_arr = np.zeros(n, dtype=np.float64)
    oob_cnt_arr = np.zeros(n, dtype=np.int64)
    cdef double[::1] oob_sum = oob_sum_arr
    cdef long[::1] oob_cnt = oob_cnt_arr

    cdef int t, nn
    cdef Py_ssize_t i
    cdef unsigned long long tree_seed
    cdef double lv

    for t in range(n_trees):
        tree_seed = _mix(sd, <unsigned long long>t)
        if bootstrap:
            _bootstrap(_mix(tree_seed, <unsigned long long>STREAM_ROWS),
                       <int>n, w)
        else:
            for i in range(n):
                w[i] = 1.0
        for i in range(n):
            g[i] = -w[i] * yv[i]
            node_of_row[i] = 0 if w[i] > 0.0 else -1
        nn = _grow_tree(XSv, siv, Xv, g, w, node_of_row,
                        0.0, 0.0, 0x7FFFFFFF, min_node_weight,
                        feats_all, eff_mtry,
                        _mix(tree_seed, <unsigned long long>STREAM_NODE),
                        o_feat, o_thr, o_left, o_right, o_val, o_cov,
                        <int>offsets[t],
                        node_g, node_h, node_depth, slot_of, frontier,
                        new_frontier, counts, best_gain, best_feat, best_thr,
                        best_gl, best_hl, base_term, gl_run, hl_run,
                        prev_val, started, mtry_pool)
        offsets[t + 1] = offsets[t] + nn
        if bootstrap:
            for i in range(n):
                if w[i] == 0.0:
                    lv = _predict_row(o_feat, o_thr, o_left, o_right, o_val,
                                      Xv, i, <int>offsets[t])
                    oob_sum[i] = oob_sum[i] + lv
                    oob_cnt[i] += 1

    total = int(offsets_arr[n_trees])
    forest = {"feature": feature_arr[:total].copy(),
              "threshold": thr_arr[:total].copy(),
              "left": left_arr[:total].copy(),
              "right": right_arr[:total].copy(),
              "value": val_arr[:total].copy(),
              "cover": cov_arr[:total].copy(),
              "offsets": offsets_arr,
              "base": 0.0,
              "tree_weights": np.full(n_trees, 1.0 / n_trees)}
    return forest, oob_sum_arr, oob_cnt_arr


def predict_forest(feature, threshold, left, right, value, offsets,
                   tree_weights, double base, X):
    cdef int[::1] featv = feature
    cdef double[::1] thrv = threshold
    cdef int[::1] leftv = left
    cdef int[::1] rightv = right
    cdef double[::1] valv = value
    cdef long[::1] offv = offsets
    cdef double[::1] wv = tree_weights
    cdef double[:, ::1] Xv = X
    cdef Py_ssize_t n = Xv.shape[0]
    out_arr = np.full(n, base)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    cdef int t
    cdef int n_trees = <int>(offv.shape[0] - 1)
    for t in range(n_trees):
        for i in range(n):
            out[i] = out[i] + wv[t] * _predict_row(featv, thrv, leftv, rightv,
                                                   valv, Xv, i, <int>offv[t])
    return out_arr


# ---------------------------------------------------------------------------
# tree-path Shapley attribution

cdef double _tree_expectation(int[::1] feat, int[::1] left, int[::1] right,
                              double[::1] val, double[::1] cov, int root,
                              int[::1] stack) noexcept nogil:
    cdef double acc = 0.0
    cdef int top = 0, nd
    stack[0] = root
    top = 1
    while top > 0:
        top -= 1
        nd = stack[top]
        if feat[nd] < 0:
            acc = acc + cov[nd] * val[nd]
        else:
            stack[top] = right[nd]
            stack[top + 1] = left[nd]
            top += 2
    return acc / cov[root]


cdef void _extend(long[::1] pd, double[::1] pz, double[::1] po, double[::1] pw,
                  int off, int U, double z, double o, long pi) noexcept nogil:
    cdef int i
    pd[off + U] = pi
    pz[off + U] = z
    po[off + U] = o
    pw[off + U] = 1.0 if U == 0 else 0.0
    for i in range(U - 1, -1, -1):
        pw[off + i + 1] += o * pw[off + i] * (i + 1) / (U + 1)
        pw[off + i] = z * pw[off + i] * (U - i) / (U + 1)


cdef void _unwind(long[::1] pd, double[::1] pz, double[::1] po, double[::1] pw,
                  int off, int U, int idx) noexcept nogil:
    cdef double one = po[off + idx]
    cdef double zero = pz[off + idx]
    cdef double nxt = pw[off + U]
    cdef double tmp
    cdef int j
    for j in range(U - 1, -1, -1):
        if one != 0.0:
            tmp = pw[off + j]
            pw[off + j] = nxt * (U + 1) / ((j + 1) * one)
            nxt = tmp - pw[off + j] * zero * (U - j) / (U + 1)
        else:
            pw[off + j] = pw[off + j] * (U + 1) / (zero * (U - j))
    for j in range(idx, U):
        pd[off + j] = pd[off + j + 1]
        pz[off + j] = pz[off + j + 1]
        po[off + j] = po[off + j + 1]


cdef double _unwound_sum(long[::1] pd, double[::1] pz, double[::1] po,
                         double[::1] pw, int off, int U, int idx) noexcept nogil:
    cdef double one = po[off + idx]
    cdef double zero = pz[off + idx]
    cdef double nxt = pw[off + U]
    cdef double total = 0.0
    cdef double tmp
    cdef int j
    if one != 0.0:
        for j in range(U - 1, -1, -1):
            tmp = nxt * (U + 1) / ((j + 1) * one)
            total += tmp
            nxt = pw[off + j] - tmp * zero * (U - j) / (U + 1)
    else:
        for j in range(U - 1, -1, -1):
            total += pw[off + j] * (U + 1) / (zero * (U - j))
    return total


cdef void _shap_recurse(int[::1] feat, double[::1] thr, int[::1] left,
                        int[::1] right, double[::1] val, double[::1] cov,
                        double[:, ::1] X, Py_ssize_t irow, double[:, ::1] phi,
                        double w_tree,
                        long[::1] pd, double[::1] pz, double[::1] po,
                        double[::1] pw, int node, int U, int poff,
                        double in_z, double in_o, long in_i) noexcept nogil:
    cdef int off = poff + U + 1
    cdef int i, f, hot, cold, path_index
    cdef double wsum, iz, io, hot_zero, cold_zero
    for i in range(U + 1):
        pd[off + i] = pd[poff + i]
        pz[off + i] = pz[poff + i]
        po[off + i] = po[poff + i]
        pw[off + i] = pw[poff + i]
    _extend(pd, pz, po, pw, off, U, in_z, in_o, in_i)
    f = feat[node]
    if f < 0:
        for i in range(1, U + 1):
            wsum = _unwound_sum(pd, pz, po, pw, off, U, i)
            phi[irow, pd[off + i]] += (wsum * (po[off + i] - pz[off + i])
                                       * val[node] * w_tree)
        return
    if X[irow, f] < thr[node]:
        hot = left[node]
        cold = right[node]
    else:
        hot = right[node]
        cold = left[node]
    iz = 1.0
    io = 1.0
    path_index = 0
    while path_index <= U:
        if pd[off + path_index] == f:
            break
        path_index += 1
    if path_index != U + 1:
        iz = pz[off + path_index]
        io = po[off + path_index]
        _unwind(pd, pz, po, pw, off, U, path_index)
        U -= 1
    hot_zero = cov[hot] / cov[node]
    cold_zero = cov[cold] / cov[node]
    _shap_recurse(feat, thr, left, right, val, cov, X, irow, phi, w_tree,
                  pd, pz, po, pw, hot, U + 1, off, iz * hot_zero, io, f)
    _shap_recurse(feat, thr, left, right, val, cov, X, irow, phi, w_tree,
                  pd, pz, po, pw, cold, U + 1, off, iz * cold_zero, 0.0, f)


cdef int _tree_max_depth(int[::1] feat, int[::1] left, int[::1] right,
                         int root, int[::1] stack, int[::1] dstack) noexcept nogil:
    cdef int best = 0, top = 0, nd, depth
    stack[0] = root
    dstack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        nd = stack[top]
        depth = dstack[top]
        if depth > best:
            best = depth
        if feat[nd] >= 0:
            stack[top] = left[nd]
            dstack[top] = depth + 1
            stack[top + 1] = right[nd]
            dstack[top + 1] = depth + 1
            top += 2
    return best


def shap_path(feature, threshold, left, right, value, cover, offsets,
              tree_weights, X):
    """Path-dependent tree Shapley values; see the fallback docstring."""
    cdef int[::1] featv = feature
    cdef double[::1] thrv = threshold
    cdef int[::1] leftv = left
    cdef int[::1] rightv = right
    cdef double[::1] valv = value
    cdef double[::1] covv = cover
    cdef long[::1] offv = offsets
    cdef double[::1] wv = tree_weights
    cdef double[:, ::1] Xv = X
    cdef Py_ssize_t n = Xv.shape[0]
    cdef Py_ssize_t d = Xv.shape[1]
    phi_arr = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] phi = phi_arr
    cdef double expected = 0.0
    cdef int n_trees = <int>(offv.shape[0] - 1)
    cdef int t, root, depth, size
    cdef Py_ssize_t i
    cdef int total = <int>featv.shape[0]
    stack_arr = np.empty(total + 2, dtype=np.int32)
    dstack_arr = np.empty(total + 2, dtype=np.int32)
    cdef int[::1] stack = stack_arr
    cdef int[::1] dstack = dstack_arr
    for t in range(n_trees):
        root = <int>offv[t]
        expected = expected + wv[t] * _tree_expectation(featv, leftv, rightv,
                                                        valv, covv, root, stack)
        depth = _tree_max_depth(featv, leftv, rightv, root, stack, dstack)
        size = (depth + 3) * (depth + 4) // 2 + depth + 4
        pd_arr = np.empty(size, dtype=np.int64)
        pz_arr = np.empty(size, dtype=np.float64)
        po_arr = np.empty(size, dtype=np.float64)
        pw_arr = np.empty(size, dtype=np.float64)
        pd = pd_arr
        pz = pz_arr
        po = po_arr
        pw = pw_arr
        for i in range(n):
            _shap_recurse(featv, thrv, leftv, rightv, valv, covv, Xv, i,
                          phi, wv[t], pd, pz, po, pw, root, 0, 0,
                          1.0, 1.0, -1)
    return phi_arr, float(expected)


# ---------------------------------------------------------------------------
# elastic-net coordinate descent

def enet_cd(X, y, double l1, double l2, double tol, long max_sweeps):
    """Cyclic coordinate descent; see the fallback docstring."""
    Xf = np.asfortranarray(X)
    cdef double[::1, :] Xv = Xf
    cdef double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t n = Xv.shape[0]
    cdef Py_ssize_t d = Xv.shape[1]
    beta_arr = np.zeros(d, dtype=np.float64)
    cdef double[::1] beta = beta_arr
    r_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] r = r_arr
    colnorm_arr = np.empty(d, dtype=np.float64)
    cdef double[::1] colnorm = colnorm_arr
    cdef Py_ssize_t i, j
    cdef double acc, z, b_old, b_new, diff, change, delta
    cdef long sweeps = 0

    for i in range(n):
        r[i] = yv[i]
    for j in range(d):
        acc = 0.0
        for i in range(n):
            acc = acc + Xv[i, j] * Xv[i, j]
        colnorm[j] = acc / n

    delta = _POS_INF
    while sweeps < max_sweeps:
        delta = 0.0
        for j in range(d):
            if colnorm[j] == 0.0:
                continue
            b_old = beta[j]
            acc = 0.0
            for i in range(n):
                acc = acc + Xv[i, j] * r[i]
            z = acc / n + colnorm[j] * b_old
            if z > l1:
                b_new = (z - l1) / (colnorm[j] + l2)
            elif z < -l1:
                b_new = (z + l1) / (colnorm[j] + l2)
            else:
                b_new = 0.0
            if b_new != b_old:
                diff = b_new - b_old
                for i in range(n):
                    r[i] = r[i] - diff * Xv[i, j]
                beta[j] = b_new
            change = b_new - b_old
            if change < 0.0:
                change = -change
            if change > delta:
                delta = change
        sweeps += 1
        if delta < tol:
            break
    return beta_arr, int(sweeps), float(delta)


# ---------------------------------------------------------------------------
# SVR sequential minimal optimization

def smo_svr(K, y, C, double eps, double tol, long max_iter):
    """Epsilon-SVR dual via maximal-violating-pair SMO; see the fallback."""
    cdef double[:, ::1] Kv = K
    cdef double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef double[::1] Cv = np.ascontiguousarray(C, dtype=np.float64)
    cdef Py_ssize_t n = yv.shape[0]
    ap_arr = np.zeros(n, dtype=np.float64)
    am_arr = np.zeros(n, dtype=np.float64)
    F_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] ap = ap_arr
    cdef double[::1] am = am_arr
    cdef double[::1] F = F_arr
    cdef long it = 0
    cdef double gap = _POS_INF
    cdef double m_up = 0.0, m_low = 0.0
    cdef Py_ssize_t i, i1, i2
    cdef double s1, s2, a1, a2, c1, c2, hi1, hi2, hi, eta, tau, score
    cdef long v1, v2

    while it < max_iter:
        m_up = _NEG_INF
        v1 = -1
        for i in range(n):
            if ap[i] < Cv[i]:
                score = yv[i] - F[i] - eps
                if score > m_up:
                    m_up = score
                    v1 = i
        for i in range(n):
            if am[i] > 0.0:
                score = yv[i] - F[i] + eps
                if score > m_up:
                    m_up = score
                    v1 = n + i
        m_low = _POS_INF
        v2 = -1
        for i in range(n):
            if ap[i] > 0.0:
                score = yv[i] - F[i] - eps
                if score < m_low:
                    m_low = score
                    v2 = i
        for i in range(n):
            if am[i] < Cv[i]:
                score = yv[i] - F[i] + eps
                if score < m_low:
                    m_low = score
                    v2 = n + i
        gap = m_up - m_low
        if gap < tol:
            break
        if v1 < n:
            i1 = v1
            s1 = 1.0
            a1 = ap[i1]
        else:
            i1 = v1 - n
            s1 = -1.0
            a1 = am[i1]
        if v2 < n:
            i2 = v2
            s2 = 1.0
            a2 = ap[i2]
        else:
            i2 = v2 - n
            s2 = -1.0
            a2 = am[i2]
        c1 = Cv[i1]
        c2 = Cv[i2]
        hi1 = c1 - a1 if s1 > 0.0 else a1
        hi2 = a2 if s2 > 0.0 else c2 - a2
        hi = hi1 if hi1 < hi2 else hi2
        eta = Kv[i1, i1] + Kv[i2, i2] - 2.0 * Kv[i1, i2]
        if eta > 1e-12:
            tau = gap / eta
            if tau > hi:
                tau = hi
        else:
            tau = hi
        if s1 > 0.0:
            ap[i1] = a1 + tau
        else:
            am[i1] = a1 - tau
        if s2 > 0.0:
            ap[i2] = ap[i2] - tau
        else:
            am[i2] = am[i2] + tau
        for i in range(n):
            F[i] = F[i] + tau * (Kv[i, i1] - Kv[i, i2])
        it += 1

    beta_arr = ap_arr - am_arr
    overlap = np.minimum(ap_arr, am_arr)
    ap_arr = ap_arr - overlap
    am_arr = am_arr - overlap
    b = (m_up + m_low) / 2.0
    return beta_arr, float(b), int(it), float(gap), ap_arr, am_arr
