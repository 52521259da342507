"""Compiled kernels for growing honest trees and evaluating forest kernels.

Trees of a forest are stored in flat ``(n_trees, max_nodes)`` arrays. A node
with ``feature < 0`` is a leaf; its estimate-half rows are
``est_rows[b, est_start[b, node]:est_end[b, node]]``. Rows with
``x[feature] <= threshold`` go left.
"""

import math

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)

TIE_TOL = 1e-12

STATUS_OK = 0
STATUS_NO_TREES = 1
STATUS_DEGENERATE = 2
STATUS_FEW_GROUPS = 3


@njit(cache=True)
def _next(state):
    # splitmix64
    state[0] = state[0] + _GOLDEN
    z = state[0]
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


@njit(cache=True)
def _below(state, k):
    return np.int64(_next(state) % np.uint64(k))


@njit(cache=True)
def _shuffle_head(a, k, state):
    """Partial Fisher-Yates: afterwards a[:k] is a uniform draw without replacement."""
    n = a.shape[0]
    for i in range(k):
        j = i + _below(state, n - i)
        t = a[i]
        a[i] = a[j]
        a[j] = t


@njit(cache=True)
def _best_split(XT, y, w, causal, sidx, s0, s1, eidx, e0, e1, feats, min_node_size, min_sign):
    """Best (feature, threshold) for one node; ``sidx[f]``/``eidx[f]`` hold the
    node's split-half / estimate-half rows sorted by feature ``f``."""
    m = s1 - s0
    ne = e1 - e0
    sy = 0.0
    syw = 0.0
    sww = 0.0
    ttot = 0
    for k in range(s0, s1):
        r = sidx[0, k]
        if causal:
            syw += y[r] * w[r]
            sww += w[r] * w[r]
            if w[r] > 0:
                ttot += 1
        else:
            sy += y[r]
    if causal:
        if sww <= 0.0:
            return -1, 0.0
        parent = m * (syw / sww) ** 2
    else:
        parent = sy * sy / m
    best = parent + 1e-10 * abs(parent)
    best_f = -1
    best_t = 0.0
    for fi in range(feats.shape[0]):
        f = feats[fi]
        ly = 0.0
        lyw = 0.0
        lww = 0.0
        ltr = 0
        ep = e0
        hi = XT[f, sidx[f, s0]]
        for k in range(1, m):
            r = sidx[f, s0 + k - 1]
            lo = hi
            hi = XT[f, sidx[f, s0 + k]]
            if causal:
                lyw += y[r] * w[r]
                lww += w[r] * w[r]
                if w[r] > 0:
                    ltr += 1
            else:
                ly += y[r]
            if k < min_node_size:
                continue
            if not lo < hi:
                continue
            if m - k < min_node_size:
                break
            t = 0.5 * (lo + hi)
            if not t < hi:
                t = lo
            while ep < e1 and XT[f, eidx[f, ep]] <= t:
                ep += 1
            if ep == e0:
                continue
            if ep >= e1:
                break
            if causal:
                lctl = k - ltr
                rtr = ttot - ltr
                rctl = (m - k) - rtr
                if ltr < min_sign or lctl < min_sign or rtr < min_sign or rctl < min_sign:
                    continue
                rww = sww - lww
                if lww <= 0.0 or rww <= 0.0:
                    continue
                ryw = syw - lyw
                gain = k * (lyw / lww) ** 2 + (m - k) * (ryw / rww) ** 2
            else:
                ry = sy - ly
                gain = ly * ly / k + ry * ry / (m - k)
            # gains within a relative 1e-12 count as ties and keep the earlier candidate
            if gain > best + TIE_TOL * best:
                best = gain
                best_f = f
                best_t = t
    return best_f, best_t


@njit(cache=True)
def _partition_sorted(idx, a0, a1, goes_left, tmp):
    """Stable partition of every row list ``idx[f, a0:a1]``; returns the split point."""
    p = idx.shape[0]
    mid = a0
    for f in range(p):
        nl = 0
        nr = 0
        for k in range(a0, a1):
            # branch-free: the side is data dependent and unpredictable
            r = idx[f, k]
            gl = np.int64(goes_left[r])
            idx[f, a0 + nl] = r
            tmp[nr] = r
            nl += gl
            nr += 1 - gl
        for k in range(nr):
            idx[f, a0 + nl + k] = tmp[k]
        mid = a0 + nl
    return mid


@njit(cache=True)
def _sorted_rows(order, in_half, size):
    p, n = order.shape
    out = np.empty((p, size), dtype=np.int64)
    for f in range(p):
        k = 0
        for j in range(n):
            r = order[f, j]
            if in_half[r]:
                out[f, k] = r
                k += 1
    return out


@njit(cache=True)
def _grow_tree(XT, y, w, causal, order, split_half, est_half, mtry, min_node_size, min_sign,
               state, feature, threshold, left, right, est_start, est_end, depth, b, est_out):
    p, n = XT.shape
    max_nodes = feature.shape[1]
    flag = np.zeros(n, dtype=np.bool_)
    for r in split_half:
        flag[r] = True
    sidx = _sorted_rows(order, flag, split_half.shape[0])
    flag[:] = False
    for r in est_half:
        flag[r] = True
    eidx = _sorted_rows(order, flag, est_half.shape[0])
    goes_left = flag
    pool = np.arange(p)
    feats = np.empty(mtry, dtype=np.int64)
    tmp = np.empty(max(split_half.shape[0], est_half.shape[0]), dtype=np.int64)
    # stack of (node, s0, s1, e0, e1, depth)
    stack = np.empty((max_nodes, 6), dtype=np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = split_half.shape[0]
    stack[0, 3] = 0
    stack[0, 4] = est_half.shape[0]
    stack[0, 5] = 0
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node = stack[top, 0]
        s0 = stack[top, 1]
        s1 = stack[top, 2]
        e0 = stack[top, 3]
        e1 = stack[top, 4]
        d = stack[top, 5]
        depth[b, node] = d
        f = -1
        t = 0.0
        if s1 - s0 >= 2 * min_node_size and e1 - e0 >= 2 and n_nodes + 2 <= max_nodes:
            _shuffle_head(pool, mtry, state)
            for k in range(mtry):
                feats[k] = pool[k]
            feats.sort()
            f, t = _best_split(XT, y, w, causal, sidx, s0, s1, eidx, e0, e1, feats,
                               min_node_size, min_sign)
        est_start[b, node] = e0
        est_end[b, node] = e1
        if f < 0:
            feature[b, node] = -1
            left[b, node] = -1
            right[b, node] = -1
            for k in range(e0, e1):
                est_out[k] = eidx[0, k]
            continue
        for k in range(s0, s1):
            r = sidx[0, k]
            goes_left[r] = XT[f, r] <= t
        sm = _partition_sorted(sidx, s0, s1, goes_left, tmp)
        for k in range(e0, e1):
            r = eidx[0, k]
            goes_left[r] = XT[f, r] <= t
        em = _partition_sorted(eidx, e0, e1, goes_left, tmp)
        feature[b, node] = f
        threshold[b, node] = t
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[b, node] = lc
        right[b, node] = rc
        # right pushed first so the left subtree is expanded first
        stack[top, 0] = rc
        stack[top, 1] = sm
        stack[top, 2] = s1
        stack[top, 3] = em
        stack[top, 4] = e1
        stack[top, 5] = d + 1
        top += 1
        stack[top, 0] = lc
        stack[top, 1] = s0
        stack[top, 2] = sm
        stack[top, 3] = e0
        stack[top, 4] = em
        stack[top, 5] = d + 1
        top += 1
    return n_nodes


@njit(cache=True)
def grow_forest(X, y, w, causal, seeds, group_size, sub_size, n_split, mtry,
                min_node_size, min_sign, max_nodes):
    """Grow ``len(seeds) * group_size`` honest trees.

    Each little-bag group draws one subsample from its own random stream
    ``seeds[g]``; every tree of the group then reshuffles that subsample into
    its split half and estimate half.
    """
    n = X.shape[0]
    XT = np.ascontiguousarray(X.T)
    n_groups = seeds.shape[0]
    n_trees = n_groups * group_size
    n_est = sub_size - n_split
    subsample = np.empty((n_groups, sub_size), dtype=np.int64)
    split_rows = np.empty((n_trees, n_split), dtype=np.int64)
    est_rows = np.empty((n_trees, n_est), dtype=np.int64)
    feature = np.full((n_trees, max_nodes), -1, dtype=np.int64)
    threshold = np.zeros((n_trees, max_nodes))
    left = np.full((n_trees, max_nodes), -1, dtype=np.int64)
    right = np.full((n_trees, max_nodes), -1, dtype=np.int64)
    est_start = np.zeros((n_trees, max_nodes), dtype=np.int64)
    est_end = np.zeros((n_trees, max_nodes), dtype=np.int64)
    depth = np.zeros((n_trees, max_nodes), dtype=np.int64)
    n_nodes = np.zeros(n_trees, dtype=np.int64)
    p = X.shape[1]
    order = np.empty((p, n), dtype=np.int64)
    for f in range(p):
        order[f] = np.argsort(X[:, f], kind="mergesort")
    for g in range(n_groups):
        state = np.empty(1, dtype=np.uint64)
        state[0] = seeds[g]
        idx = np.arange(n)
        _shuffle_head(idx, sub_size, state)
        sub = np.sort(idx[:sub_size])
        subsample[g] = sub
        in_sub = np.zeros(n, dtype=np.bool_)
        in_sub[sub] = True
        sub_order = _sorted_rows(order, in_sub, sub_size)
        for j in range(group_size):
            b = g * group_size + j
            rows = sub.copy()
            _shuffle_head(rows, n_split, state)
            split_rows[b] = np.sort(rows[:n_split])
            n_nodes[b] = _grow_tree(XT, y, w, causal, sub_order, split_rows[b], rows[n_split:],
                                    mtry, min_node_size, min_sign, state, feature, threshold,
                                    left, right, est_start, est_end, depth, b, est_rows[b])
    return (subsample, split_rows, est_rows, feature, threshold, left, right,
            est_start, est_end, depth, n_nodes)


@njit(cache=True)
def pack_nodes(feature, threshold, left, right):
    """(tree, node, [feature, threshold, left, right]) so one visit touches one cache line."""
    n_trees, max_nodes = feature.shape
    out = np.empty((n_trees, max_nodes, 4))
    for b in range(n_trees):
        for k in range(max_nodes):
            out[b, k, 0] = feature[b, k]
            out[b, k, 1] = threshold[b, k]
            out[b, k, 2] = left[b, k]
            out[b, k, 3] = right[b, k]
    return out


@njit(cache=True, inline="always")
def find_leaf(nodes, b, x):
    node = 0
    while True:
        f = np.int64(nodes[b, node, 0])
        if f < 0:
            return node
        if x[f] <= nodes[b, node, 1]:
            node = np.int64(nodes[b, node, 2])
        else:
            node = np.int64(nodes[b, node, 3])


@njit(cache=True)
def leaf_sums(feature, est_rows, est_start, est_end, n_nodes, a, c):
    """Per-leaf estimate-half sums of ``a * c`` and leaf sizes."""
    n_trees, max_nodes = feature.shape
    s = np.zeros((n_trees, max_nodes))
    cnt = np.zeros((n_trees, max_nodes))
    for b in range(n_trees):
        for node in range(n_nodes[b]):
            if feature[b, node] >= 0:
                continue
            acc = 0.0
            for k in range(est_start[b, node], est_end[b, node]):
                r = est_rows[b, k]
                acc += a[r] * c[r]
            s[b, node] = acc
            cnt[b, node] = est_end[b, node] - est_start[b, node]
    return s, cnt


@njit(cache=True)
def membership(subsample, n):
    g = subsample.shape[0]
    member = np.zeros((g, n), dtype=np.bool_)
    for i in range(g):
        for k in range(subsample.shape[1]):
            member[i, subsample[i, k]] = True
    return member


@njit(cache=True)
def regression_predict(Xq, exclude, nodes, leaf_sum, leaf_cnt, member, group_size):
    """Average of leaf means over trees; ``exclude[q] >= 0`` drops trees whose
    subsample holds that training row."""
    nq = Xq.shape[0]
    n_groups = member.shape[0]
    acc = np.zeros(nq)
    used = np.zeros(nq, dtype=np.int64)
    for g in range(n_groups):
        for j in range(group_size):
            b = g * group_size + j
            for q in range(nq):
                if exclude[q] >= 0 and member[g, exclude[q]]:
                    continue
                leaf = find_leaf(nodes, b, Xq[q])
                acc[q] += leaf_sum[b, leaf] / leaf_cnt[b, leaf]
                used[q] += 1
    out = np.full(nq, np.nan)
    for q in range(nq):
        if used[q] > 0:
            out[q] = acc[q] / used[q]
    return out, used


@njit(cache=True)
def kernel_weights(x, exclude, n, nodes, est_rows, est_start, est_end, member, group_size):
    n_groups = member.shape[0]
    alpha = np.zeros(n)
    k = 0
    for g in range(n_groups):
        if exclude >= 0 and member[g, exclude]:
            continue
        for j in range(group_size):
            b = g * group_size + j
            leaf = find_leaf(nodes, b, x)
            a0 = est_start[b, leaf]
            a1 = est_end[b, leaf]
            inv = 1.0 / (a1 - a0)
            for r in range(a0, a1):
                alpha[est_rows[b, r]] += inv
            k += 1
    if k > 0:
        alpha /= k
    return alpha, k


@njit(cache=True)
def _bayes_debias(var_between, group_noise, n_groups):
    # posterior mean of a positive variance under a flat prior
    initial = var_between - group_noise
    initial_se = max(var_between, group_noise) * math.sqrt(2.0 / n_groups)
    if initial_se <= 0.0:
        return max(initial, 0.0)
    ratio = initial / initial_se
    num = math.exp(-0.5 * ratio * ratio) / math.sqrt(2.0 * math.pi)
    den = 0.5 * math.erfc(-ratio / math.sqrt(2.0))
    if den < 1e-300:
        return initial_se * initial_se / abs(initial)
    return initial + initial_se * num / den


@njit(cache=True)
def causal_predict(Xq, exclude, nodes, leaf_yw, leaf_ww, leaf_cnt, member, group_size,
                   min_den, var_floor):
    """Weighted Robinson estimate with little-bags variance at each query.

    Per tree b the leaf containing the query contributes ``num_b`` (mean of
    y_res * w_res) and ``den_b`` (mean of w_res**2); the estimate is
    ``sum num_b / sum den_b``. The variance uses the residuals
    ``psi_b = num_b - tau * den_b`` grouped by little bag, accumulated through
    their first and second moments. Returns point, variance, excess (Monte
    Carlo) variance, trees used and a status code per query.
    """
    nq = Xq.shape[0]
    n_groups = member.shape[0]
    gs = group_size
    s_n = np.zeros(nq)
    s_d = np.zeros(nq)
    q_nn = np.zeros(nq)
    q_nd = np.zeros(nq)
    q_dd = np.zeros(nq)
    g_nn = np.zeros(nq)
    g_nd = np.zeros(nq)
    g_dd = np.zeros(nq)
    gn = np.zeros(nq)
    gd = np.zeros(nq)
    n_grp = np.zeros(nq, dtype=np.int64)
    for g in range(n_groups):
        gn[:] = 0.0
        gd[:] = 0.0
        for j in range(gs):
            b = g * gs + j
            for q in range(nq):
                if exclude[q] >= 0 and member[g, exclude[q]]:
                    continue
                leaf = find_leaf(nodes, b, Xq[q])
                c = leaf_cnt[b, leaf]
                nb = leaf_yw[b, leaf] / c
                db = leaf_ww[b, leaf] / c
                s_n[q] += nb
                s_d[q] += db
                q_nn[q] += nb * nb
                q_nd[q] += nb * db
                q_dd[q] += db * db
                gn[q] += nb
                gd[q] += db
        for q in range(nq):
            if exclude[q] >= 0 and member[g, exclude[q]]:
                continue
            mn = gn[q] / gs
            md = gd[q] / gs
            g_nn[q] += mn * mn
            g_nd[q] += mn * md
            g_dd[q] += md * md
            n_grp[q] += 1
    point = np.full(nq, np.nan)
    var = np.full(nq, np.nan)
    excess = np.full(nq, np.nan)
    used = n_grp * gs
    status = np.zeros(nq, dtype=np.int64)
    for q in range(nq):
        k = used[q]
        if k == 0:
            status[q] = STATUS_NO_TREES
            continue
        dbar = s_d[q] / k
        if dbar < min_den:
            status[q] = STATUS_DEGENERATE
            continue
        tau = s_n[q] / s_d[q]
        point[q] = tau
        gk = n_grp[q]
        if gk < 2:
            status[q] = STATUS_FEW_GROUPS
            continue
        # the psi_b average to zero at tau, so group means are centred already
        between = max(g_nn[q] - 2.0 * tau * g_nd[q] + tau * tau * g_dd[q], 0.0) / gk
        excess[q] = between / gk / (dbar * dbar)
        if gs < 2:
            status[q] = STATUS_FEW_GROUPS
            continue
        total = q_nn[q] - 2.0 * tau * q_nd[q] + tau * tau * q_dd[q]
        within = max(total - gs * gk * between, 0.0)
        noise = within / (gk * (gs - 1)) / gs
        v = _bayes_debias(between, noise, gk) / (dbar * dbar)
        var[q] = max(v, var_floor)
    return point, var, excess, used, status


@njit(cache=True)
def tree_rloss(X, y_res, w_res, nodes, leaf_yw, leaf_ww, member, group_size):
    """Out-of-bag R-loss of every tree used on its own, leaf Robinson estimates."""
    n = X.shape[0]
    n_groups = member.shape[0]
    loss = np.zeros(n_groups * group_size)
    for g in range(n_groups):
        for j in range(group_size):
            b = g * group_size + j
            acc = 0.0
            for i in range(n):
                if member[g, i]:
                    continue
                leaf = find_leaf(nodes, b, X[i])
                ww = leaf_ww[b, leaf]
                tau = leaf_yw[b, leaf] / ww if ww > 0 else 0.0
                r = y_res[i] - tau * w_res[i]
                acc += r * r
            loss[b] = acc
    return loss


@njit(cache=True)
def canonical_layout(feature, est_rows, est_start, est_end, n_nodes):
    """Lay estimate rows out leaf by leaf in node-index order (stable within a leaf)."""
    n_trees = feature.shape[0]
    out = np.empty_like(est_rows)
    new_start = est_start.copy()
    new_end = est_end.copy()
    for b in range(n_trees):
        pos = 0
        for node in range(n_nodes[b]):
            if feature[b, node] >= 0:
                continue
            a0 = est_start[b, node]
            a1 = est_end[b, node]
            new_start[b, node] = pos
            for k in range(a0, a1):
                out[b, pos] = est_rows[b, k]
                pos += 1
            new_end[b, node] = pos
        # internal nodes keep no meaningful range
        for node in range(n_nodes[b]):
            if feature[b, node] >= 0:
                new_start[b, node] = 0
                new_end[b, node] = 0
    return out, new_start, new_end
