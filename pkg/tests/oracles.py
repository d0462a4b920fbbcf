"""Slow, obviously-correct reference implementations used by the tests."""

from __future__ import annotations

import itertools
import math

import numpy as np


# -- ranking metrics ------------------------------------------------------------


def dcg_oracle(order, qrels, k):
    total = 0.0
    for pos, item in enumerate(order[:k], start=1):
        total += (2 ** qrels.get(item, 0) - 1) / math.log2(pos + 1)
    return total


def ndcg_oracle(order, qrels, k):
    """IDCG is the best DCG over every permutation of the judged items."""
    items = list(qrels)
    ideal = max(dcg_oracle(list(p), qrels, k) for p in itertools.permutations(items))
    if ideal == 0:
        return 0.0
    return dcg_oracle(order, qrels, k) / ideal


def recall_oracle(order, qrels, k):
    pos = [i for i, g in qrels.items() if g > 0]
    if not pos:
        return 0.0
    return sum(1 for i in pos if i in order[:k]) / len(pos)


def top1_oracle(order, qrels):
    grades = [qrels.get(i, 0) for i in qrels] or [0]
    return int(qrels.get(order[0], 0) == max(grades))


def pwacc_oracle(pred, truth):
    common = [i for i in pred if i in truth]
    pairs = list(itertools.combinations(common, 2))
    if not pairs:
        return 1.0
    agree = sum(truth.index(a) < truth.index(b) for a, b in pairs)
    return agree / len(pairs)


# -- boosted trees ---------------------------------------------------------------


def _sse(r, w, rows, v):
    return sum(w[i] * (r[i] - v) ** 2 for i in rows)


def _mean(r, w, rows, lo, hi):
    v = sum(w[i] * r[i] for i in rows) / sum(w[i] for i in rows)
    return min(max(v, lo), hi)


def tree_oracle(X, r, w, rows, max_depth, min_leaf, monotone, lo=-math.inf, hi=math.inf, depth=0):
    """Exhaustive greedy split search; returns a nested dict.

    Same rules as the production learner: candidate thresholds are midpoints
    between consecutive distinct values, leaves are clamped means, a monotone
    split must order its child values and the children's bounds meet at the
    midpoint of the two values. Ties prefer the lower feature, then the
    lower threshold.
    """
    node_value = _mean(r, w, rows, lo, hi)
    leaf = {"leaf": node_value}
    if depth >= max_depth or len(rows) < 2 * min_leaf:
        return leaf
    parent = _sse(r, w, rows, node_value)
    best = None
    for f in range(X.shape[1]):
        values = sorted({X[i, f] for i in rows})
        for a, b in zip(values, values[1:]):
            thr = 0.5 * (a + b)
            left = [i for i in rows if X[i, f] <= thr]
            right = [i for i in rows if X[i, f] > thr]
            if len(left) < min_leaf or len(right) < min_leaf:
                continue
            vl, vr = _mean(r, w, left, lo, hi), _mean(r, w, right, lo, hi)
            if monotone.get(f) == -1 and vl < vr:
                continue
            if monotone.get(f) == 1 and vl > vr:
                continue
            gain = parent - _sse(r, w, left, vl) - _sse(r, w, right, vr)
            if gain <= 1e-12:
                continue
            tol = 1e-9 * max(1.0, abs(best[0])) if best else 0.0
            if best is None or gain > best[0] + tol:
                best = (gain, f, thr, left, right, vl, vr)
    if best is None:
        return leaf
    gain, f, thr, left, right, vl, vr = best
    l_lo, l_hi, r_lo, r_hi = lo, hi, lo, hi
    if f in monotone:
        mid = 0.5 * (vl + vr)
        if monotone[f] == -1:
            l_lo, r_hi = mid, mid
        else:
            l_hi, r_lo = mid, mid
    return {
        "feature": f,
        "threshold": thr,
        "left": tree_oracle(X, r, w, left, max_depth, min_leaf, monotone, l_lo, l_hi, depth + 1),
        "right": tree_oracle(X, r, w, right, max_depth, min_leaf, monotone, r_lo, r_hi, depth + 1),
    }


def flatten(tree, node=0):
    """Production Tree -> nested dict in the oracle's shape."""
    if tree.feature[node] < 0:
        return {"leaf": tree.value[node]}
    return {
        "feature": tree.feature[node],
        "threshold": tree.threshold[node],
        "left": flatten(tree, tree.left[node]),
        "right": flatten(tree, tree.right[node]),
    }


def predict_nested(node, x):
    while "leaf" not in node:
        node = node["left"] if x[node["feature"]] <= node["threshold"] else node["right"]
    return node["leaf"]


def scale_nested(node, s):
    if "leaf" in node:
        return {"leaf": node["leaf"] * s}
    return {**node, "left": scale_nested(node["left"], s), "right": scale_nested(node["right"], s)}


def boost_oracle(X, y, w, n_rounds, lr, max_depth, min_leaf, monotone):
    """Full-sample boosting with the same loss guard as production."""
    n = len(y)
    rows = list(range(n))
    base = sum(w * y) / sum(w)
    pred = np.full(n, base)
    trees = []
    loss = float(np.sum(w * (y - pred) ** 2))
    for _ in range(n_rounds):
        resid = y - pred
        t = tree_oracle(X, resid, w, rows, max_depth, min_leaf, monotone)
        step = np.array([predict_nested(t, X[i]) for i in rows])
        wt = float(np.sum(w * step * step))
        if wt > 0 and float(np.sum(w * (y - pred - lr * step) ** 2)) > loss:
            s = float(np.sum(w * resid * step)) / wt
            if s <= 0:
                continue
            t = scale_nested(t, min(s, lr) / lr)
            step = np.array([predict_nested(t, X[i]) for i in rows])
        pred = pred + lr * step
        trees.append(t)
        loss = float(np.sum(w * (y - pred) ** 2))
    return base, trees


def trees_match(a, b, tol=1e-9):
    if ("leaf" in a) != ("leaf" in b):
        return False
    if "leaf" in a:
        return abs(a["leaf"] - b["leaf"]) <= tol * max(1.0, abs(a["leaf"]))
    return (
        a["feature"] == b["feature"]
        and abs(a["threshold"] - b["threshold"]) <= tol
        and trees_match(a["left"], b["left"], tol)
        and trees_match(a["right"], b["right"], tol)
    )


# -- frontier and masks ------------------------------------------------------------


def dominance_oracle(points):
    """O(n^2) non-dominated set as (tokens, utility) pairs, duplicates collapsed."""
    keys = sorted({(p.mean_tokens, p.utility) for p in points})
    out = []
    for t, u in keys:
        dominated = any(
            (t2 <= t and u2 >= u) and (t2 < t or u2 > u) for t2, u2 in keys
        )
        if not dominated:
            out.append((t, u))
    return out


def mask_predicate(prefix_len, blocks, i, j):
    """1-based positions; blocks are (start, end) inclusive."""
    if j > i:
        return False
    if j <= prefix_len:
        return True

    def block_of(p):
        for b, (s, e) in enumerate(blocks):
            if s <= p <= e:
                return b
        return None

    return block_of(i) is not None and block_of(i) == block_of(j)


def monotone_violations(model, X_ref, n_pairs=10_000, seed=0, feature="delta_cost_est"):
    """Count probe pairs where raising ``feature`` alone raises the prediction."""
    rng = np.random.default_rng(seed)
    j = model.schema.index(feature)
    rows = X_ref[rng.integers(len(X_ref), size=n_pairs)].copy()
    lo, hi = X_ref.min(axis=0), X_ref.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    # jitter every coordinate so probes also land between training points
    rows += rng.normal(0, 0.1, rows.shape) * span
    low = rng.uniform(lo[j] - 0.2 * span[j], hi[j] + 0.2 * span[j], n_pairs)
    high = low + rng.exponential(0.3 * span[j], n_pairs) + 1e-9
    a, b = rows.copy(), rows.copy()
    a[:, j], b[:, j] = low, high
    return int((model.predict_matrix(b) > model.predict_matrix(a)).sum())
