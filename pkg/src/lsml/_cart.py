"""Compiled kernels for regression-tree fitting and evaluation.

Trees are stored as parallel node arrays (feature, threshold, left, right,
value); ``feature == -1`` marks a leaf. A sample goes left when
``x[feature] <= threshold``.
"""
import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True, nogil=True)
def _splitmix64(state):
    state[0] += _GOLDEN
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True)
def build_tree(X, y, samples, max_features, min_leaf, max_depth, seed):
    """Grow one CART regression tree on the rows listed in ``samples``.

    ``samples`` may repeat rows (bootstrap). ``max_depth < 0`` means
    unlimited. Returns trimmed node arrays.

    Every feature keeps the sample positions sorted by its value; a node
    owns the same segment ``[lo, hi)`` of each sorted list, and splitting
    partitions those segments stably, so no node ever re-sorts.
    """
    n = samples.shape[0]
    d = X.shape[1]
    cap = 2 * n + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)

    xs = np.empty((d, n))
    ys = np.empty(n)
    for p in range(n):
        ys[p] = y[samples[p]]
        for f in range(d):
            xs[f, p] = X[samples[p], f]
    order = np.empty((d, n), np.int64)
    for f in range(d):
        order[f] = np.argsort(xs[f], kind="mergesort")
    goes_left = np.zeros(n, np.bool_)
    scratch = np.empty(n, np.int64)

    feats = np.arange(d)
    state = np.empty(1, np.uint64)
    state[0] = np.uint64(seed)

    st_node = np.empty(cap, np.int64)
    st_lo = np.empty(cap, np.int64)
    st_hi = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = n
    st_depth[0] = 0
    sp = 1
    n_nodes = 1

    while sp > 0:
        sp -= 1
        node = st_node[sp]
        lo = st_lo[sp]
        hi = st_hi[sp]
        depth = st_depth[sp]
        cnt = hi - lo

        total = 0.0
        ymin = np.inf
        ymax = -np.inf
        for r in range(lo, hi):
            yv = ys[order[0, r]]
            total += yv
            if yv < ymin:
                ymin = yv
            if yv > ymax:
                ymax = yv
        if ymin == ymax:
            # exact value for pure nodes; a running sum can drift
            value[node] = ymin
            continue
        value[node] = total / cnt
        if cnt < 2 * min_leaf:
            continue
        if max_depth >= 0 and depth >= max_depth:
            continue

        if max_features < d:
            for q in range(max_features):
                pick = q + np.int64(_splitmix64(state) % np.uint64(d - q))
                tmp = feats[q]
                feats[q] = feats[pick]
                feats[pick] = tmp
            cand = np.sort(feats[:max_features])
        else:
            cand = np.arange(d)

        best_score = -np.inf
        best_f = -1
        best_t = 0.0
        for f in cand:
            if xs[f, order[f, lo]] == xs[f, order[f, hi - 1]]:
                continue
            sl = 0.0
            for q in range(cnt - 1):
                sl += ys[order[f, lo + q]]
                nl = q + 1
                nr = cnt - nl
                if nr < min_leaf:
                    break
                if nl < min_leaf:
                    continue
                x0 = xs[f, order[f, lo + q]]
                x1 = xs[f, order[f, lo + q + 1]]
                if x1 <= x0:
                    continue
                sr = total - sl
                score = sl * sl / nl + sr * sr / nr
                if score > best_score:
                    best_score = score
                    best_f = f
                    t = 0.5 * (x0 + x1)
                    if t >= x1:
                        t = x0
                    best_t = t
        if best_f < 0:
            continue

        nl = 0
        for r in range(lo, hi):
            p = order[best_f, r]
            goes_left[p] = xs[best_f, p] <= best_t
            if goes_left[p]:
                nl += 1
        for f in range(d):
            a = 0
            b = nl
            for r in range(lo, hi):
                p = order[f, r]
                if goes_left[p]:
                    scratch[a] = p
                    a += 1
                else:
                    scratch[b] = p
                    b += 1
            for r in range(cnt):
                order[f, lo + r] = scratch[r]

        feature[node] = best_f
        threshold[node] = best_t
        left[node] = n_nodes
        right[node] = n_nodes + 1
        # right pushed first so the left subtree is processed first
        st_node[sp] = n_nodes + 1
        st_lo[sp] = lo + nl
        st_hi[sp] = hi
        st_depth[sp] = depth + 1
        sp += 1
        st_node[sp] = n_nodes
        st_lo[sp] = lo
        st_hi[sp] = lo + nl
        st_depth[sp] = depth + 1
        sp += 1
        n_nodes += 2

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
    )


@njit(cache=True, nogil=True)
def _leaf_value(x_row, feature, threshold, left, right, value, off):
    node = 0
    while feature[off + node] >= 0:
        if x_row[feature[off + node]] <= threshold[off + node]:
            node = left[off + node]
        else:
            node = right[off + node]
    return value[off + node]


@njit(cache=True, nogil=True)
def predict_forest(X, feature, threshold, left, right, value, offsets):
    """Mean over trees; trees are concatenated with start ``offsets``."""
    n_trees = offsets.shape[0]
    out = np.zeros(X.shape[0])
    for r in range(X.shape[0]):
        acc = 0.0
        for t in range(n_trees):
            acc += _leaf_value(X[r], feature, threshold, left, right, value, offsets[t])
        out[r] = acc / n_trees
    return out


@njit(cache=True, nogil=True)
def predict_tree_rows(X, rows, feature, threshold, left, right, value, off, col, src):
    """Predict ``rows`` with one tree, optionally reading column ``col`` from ``src`` rows.

    With ``col >= 0`` the value of feature ``col`` for ``rows[q]`` is taken
    from ``X[src[q], col]`` (a permuted column).
    """
    out = np.empty(rows.shape[0])
    x = np.empty(X.shape[1])
    for q in range(rows.shape[0]):
        for j in range(X.shape[1]):
            x[j] = X[rows[q], j]
        if col >= 0:
            x[col] = X[src[q], col]
        out[q] = _leaf_value(x, feature, threshold, left, right, value, off)
    return out
