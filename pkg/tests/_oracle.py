"""Slow, direct re-implementations used as test oracles.

Nothing here imports the compiled kernels: trees are read from the JSON
dump of a forest and every quantity is computed with plain Python loops.
"""

from __future__ import annotations

import math


def _leaf_samples(tree, x):
    nodes = tree["nodes"]
    k = 0
    while "samples" not in nodes[k]:
        nd = nodes[k]
        k = nd["left"] if x[nd["feature"]] <= nd["threshold"] else nd["right"]
    return nodes[k]["samples"]


def eligible_trees(dump, exclude=None):
    out = []
    for tree in dump["trees"]:
        if exclude is not None and exclude in set(tree["subsample"]):
            continue
        out.append(tree)
    return out


def kernel(dump, x, exclude=None):
    """alpha_i(x): mean over eligible trees of 1{i in leaf(x)} / |leaf(x)|."""
    n = dump["n_train"]
    trees = eligible_trees(dump, exclude)
    alpha = [0.0] * n
    for tree in trees:
        leaf = _leaf_samples(tree, x)
        for i in leaf:
            alpha[i] += 1.0 / len(leaf)
    return [a / len(trees) for a in alpha]


def robinson(alpha, y_res, w_res):
    num = sum(a * y * w for a, y, w in zip(alpha, y_res, w_res))
    den = sum(a * w * w for a, w in zip(alpha, w_res))
    return num / den


def little_bags(dump, x, y_res, w_res, exclude=None):
    """Point estimate, debiased variance and excess error, straight from the definitions."""
    gs = dump["params"]["ci_group_size"]
    groups = {}
    for b, tree in enumerate(dump["trees"]):
        if exclude is not None and exclude in set(tree["subsample"]):
            continue
        leaf = _leaf_samples(tree, x)
        nb = sum(y_res[i] * w_res[i] for i in leaf) / len(leaf)
        db = sum(w_res[i] ** 2 for i in leaf) / len(leaf)
        groups.setdefault(b // gs, []).append((nb, db))
    pairs = [p for g in groups.values() for p in g]
    tau = sum(p[0] for p in pairs) / sum(p[1] for p in pairs)
    dbar = sum(p[1] for p in pairs) / len(pairs)
    G = len(groups)
    psi_bar = []
    within = 0.0
    for g in groups.values():
        psi = [nb - tau * db for nb, db in g]
        m = sum(psi) / len(psi)
        psi_bar.append(m)
        within += sum((v - m) ** 2 for v in psi)
    between = sum(m * m for m in psi_bar) / G
    noise = within / (G * (gs - 1)) / gs
    initial = between - noise
    initial_se = max(between, noise) * math.sqrt(2.0 / G)
    r = initial / initial_se
    phi = math.exp(-r * r / 2) / math.sqrt(2 * math.pi)
    Phi = 0.5 * math.erfc(-r / math.sqrt(2))
    debiased = initial + initial_se * phi / Phi
    return tau, max(debiased / dbar ** 2, 1e-12), between / G / dbar ** 2


# ---------------------------------------------------------------------------
# tree growing


def best_split(X, y, w, causal, rows, est, min_node_size):
    """Exhaustive search over (feature, midpoint) candidates of one node."""
    m = len(rows)
    min_sign = max(2, min_node_size // 2)
    if causal:
        syw = sum(y[r] * w[r] for r in rows)
        sww = sum(w[r] * w[r] for r in rows)
        if sww <= 0:
            return None
        parent = m * (syw / sww) ** 2
    else:
        parent = sum(y[r] for r in rows) ** 2 / m
    best = parent + 1e-10 * abs(parent)
    found = None
    for f in range(len(X[0])):
        values = sorted({X[r][f] for r in rows})
        for lo, hi in zip(values[:-1], values[1:]):
            t = 0.5 * (lo + hi)
            if not t < hi:
                t = lo
            left = [r for r in rows if X[r][f] <= t]
            right = [r for r in rows if X[r][f] > t]
            if len(left) < min_node_size or len(right) < min_node_size:
                continue
            if not any(X[r][f] <= t for r in est) or all(X[r][f] <= t for r in est):
                continue
            if causal:
                ok = True
                for side in (left, right):
                    tr = sum(1 for r in side if w[r] > 0)
                    if tr < min_sign or len(side) - tr < min_sign:
                        ok = False
                if not ok:
                    continue
                gain = 0.0
                for side in (left, right):
                    ww = sum(w[r] * w[r] for r in side)
                    if ww <= 0:
                        ok = False
                        break
                    gain += len(side) * (sum(y[r] * w[r] for r in side) / ww) ** 2
                if not ok:
                    continue
            else:
                gain = sum(y[r] for r in left) ** 2 / len(left) + sum(y[r] for r in right) ** 2 / len(right)
            if gain > best + 1e-12 * best:
                best = gain
                found = (f, t)
    return found


def grow_tree(X, y, w, causal, split_rows, est_rows, min_node_size):
    """Honest tree with every feature tried at each node.

    Returns the node list in the dump layout. Nodes are numbered in creation
    order with the left subtree expanded first.
    """
    nodes = [None]
    stack = [(0, sorted(split_rows), sorted(est_rows))]
    while stack:
        k, rows, est = stack.pop()
        split = None
        if len(rows) >= 2 * min_node_size and len(est) >= 2:
            split = best_split(X, y, w, causal, rows, est, min_node_size)
        if split is None:
            nodes[k] = {"samples": sorted(est)}
            continue
        f, t = split
        lc, rc = len(nodes), len(nodes) + 1
        nodes.extend([None, None])
        nodes[k] = {"feature": f, "threshold": t, "left": lc, "right": rc}
        stack.append((rc, [r for r in rows if X[r][f] > t], [r for r in est if X[r][f] > t]))
        stack.append((lc, [r for r in rows if X[r][f] <= t], [r for r in est if X[r][f] <= t]))
    return nodes
