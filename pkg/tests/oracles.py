"""Brute-force reference implementations the library is checked against.

Everything here is written as plain loops over Python lists so that it
shares no code path with the vectorised implementations under test.
"""
import math

import numpy as np


# -- pair selection --------------------------------------------------------------

def select_pairs_bruteforce(M_b, M_p, M_l, s_b, s_l, K):
    n = M_b.shape[0]
    cells = [(i, j) for i in range(n) for j in range(n) if i != j]
    ranked = sorted(cells, key=lambda c: (-M_p[c], c[0], c[1]))
    top = set(ranked[:K])
    return [(i, j) for (i, j) in cells if M_b[i, j] < s_b and M_l[i, j] > s_l and (i, j) in top]


# -- dual graph -------------------------------------------------------------------

def dual_graph_bruteforce(edges):
    """Pairs (e, f), e < f, of relations sharing an endpoint, with the smallest shared object."""
    out = []
    for e in range(len(edges)):
        for f in range(e + 1, len(edges)):
            common = {int(edges[e][0]), int(edges[e][1])} & {int(edges[f][0]), int(edges[f][1])}
            if common:
                out.append((e, f, min(common)))
    return out


# -- message passing -------------------------------------------------------------------

def _softmax(xs):
    m = max(xs)
    ex = [math.exp(x - m) for x in xs]
    s = sum(ex)
    return [v / s for v in ex]


def _relu(v):
    return np.maximum(v, 0.0)


def intra_relation_dense(R, edges, W, att):
    d = R.shape[1]
    out = R.copy()
    for u in range(len(edges)):
        nbrs = [v for v in range(len(edges)) if v != u and set(map(int, edges[u])) & set(map(int, edges[v]))]
        if not nbrs:
            continue
        alpha = _softmax([float(att[:d] @ R[u] + att[d:] @ R[v]) for v in nbrs])
        msg = sum(a * (R[v] @ W) for a, v in zip(alpha, nbrs))
        out[u] = R[u] + _relu(msg)
    return out


def intra_object_dense(X, edges, W, att):
    d = X.shape[1]
    out = X.copy()
    linked = {(int(a), int(b)) for a, b in edges} | {(int(b), int(a)) for a, b in edges}
    for i in range(len(X)):
        nbrs = [j for j in range(len(X)) if j != i and (i, j) in linked]
        if not nbrs:
            continue
        alpha = _softmax([float(att[:d] @ X[i] + att[d:] @ X[j]) for j in nbrs])
        msg = sum(a * (X[j] @ W) for a, j in zip(alpha, nbrs))
        out[i] = X[i] + _relu(msg)
    return out


def inter_relation_dense(X, R, edges, types, W_subj, W_objt, att_h):
    out = R.copy()
    for e, (i, j) in enumerate(edges):
        t = int(types[e])
        a = math.exp(float(att_h @ X[i])) / (math.exp(float(att_h @ X[i])) + math.exp(float(att_h @ X[j])))
        out[e] = R[e] + _relu(a * (X[i] @ W_subj[t]) + (1 - a) * (X[j] @ W_objt[t]))
    return out


def inter_object_dense(X, R, edges, types, W_out, W_in, att_t, n_types):
    out = X.copy()
    for i in range(len(X)):
        total = np.zeros(X.shape[1])
        for t in range(n_types):
            incident = [(e, edges[e][0] == i) for e in range(len(edges))
                        if int(types[e]) == t and i in (int(edges[e][0]), int(edges[e][1]))]
            if not incident:
                continue
            alpha = _softmax([float(att_t @ R[e]) for e, _ in incident])
            agg = sum(a * (R[e] @ (W_out[t] if outgoing else W_in[t])) for a, (e, outgoing) in zip(alpha, incident))
            total = total + _relu(agg)
        out[i] = X[i] + total / n_types
    return out


# -- metrics ----------------------------------------------------------------------------

def greedy_match_oracle(preds, gts, compatible):
    """Rank-greedy one-to-one assignment; ``compatible(p, g)`` decides a match."""
    order = sorted(range(len(preds)), key=lambda k: -preds[k].score)
    hit = [math.inf] * len(gts)
    for rank, k in enumerate(order):
        for g in range(len(gts)):
            if hit[g] == math.inf and compatible(preds[k], gts[g]):
                hit[g] = rank
                break
    return hit


def iou_scalar(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua


# -- finite differences -----------------------------------------------------------------

def max_relative_error(loss_fn, tensors, rng, step=1e-5, per_tensor=6, scale_floor=1e-3):
    """Largest relative gap between analytic gradients and central differences.

    ``tensors`` maps names to autodiff tensors whose ``.grad`` already holds
    the analytic gradient of ``loss_fn()``. ``per_tensor`` random entries
    of each are probed, or all of them when it is None.

    Central differences carry round-off of roughly eps * |loss| / step, so an
    entry whose gradient is itself near that level has no meaningful
    relative error. Each denominator is therefore floored at
    ``scale_floor`` times the largest gradient magnitude in the same tensor.
    Returns (max error, where, largest absolute gap among floored entries).
    """
    worst, where, raw = 0.0, None, 0.0
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        grad = np.zeros_like(flat) if t.grad is None else t.grad.reshape(-1)
        floor = max(scale_floor * float(np.max(np.abs(grad), initial=0.0)), 1e-12)
        picks = range(flat.size) if per_tensor is None else \
            rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        for k in picks:
            old = flat[k]
            flat[k] = old + step
            up = loss_fn()
            flat[k] = old - step
            down = loss_fn()
            flat[k] = old
            numeric = (up - down) / (2 * step)
            gap = abs(numeric - grad[k])
            if max(abs(numeric), abs(grad[k])) < floor:
                raw = max(raw, gap)
            err = gap / max(abs(numeric), abs(grad[k]), floor)
            if err > worst:
                worst, where = err, (name, int(k), float(grad[k]), float(numeric))
    return worst, where, raw
