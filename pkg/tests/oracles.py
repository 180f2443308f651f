"""Independent reference implementations used only by the tests.

Everything here is written with plain Python loops or arbitrary-precision
arithmetic so that it shares no code path with the package.
"""
from __future__ import annotations

import itertools
import math
from fractions import Fraction

import mpmath
import numpy as np


def fps_bruteforce(coords, m, seed="nearest_to_centroid"):
    """Greedy max-min selection, recomputing every distance from scratch."""
    pts = [tuple(float(v) for v in row) for row in np.asarray(coords)]
    n = len(pts)

    def dist(a, b):
        return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))

    if seed == "first_index":
        first = 0
    else:
        # exact rational arithmetic so structural ties (e.g. N=2) are true ties
        exact = [[Fraction(v) for v in p] for p in pts]
        mean = [sum(p[d] for p in exact) / n for d in range(len(exact[0]))]
        sq = [sum((v - c) ** 2 for v, c in zip(p, mean)) for p in exact]
        first = min(range(n), key=lambda i: (sq[i], i))
    chosen = [first]
    while len(chosen) < m:
        best, best_d = None, -1.0
        for q in range(n):
            if q in chosen:
                continue
            d = min(dist(pts[q], pts[s]) for s in chosen)
            if d > best_d:
                best, best_d = q, d
        chosen.append(best)
    return chosen


def knn_bruteforce(queries, reference, k):
    out_idx, out_d = [], []
    for q in np.asarray(queries):
        d = [math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(q, r))) for r in reference]
        order = sorted(range(len(d)), key=lambda i: (d[i], i))[:k]
        out_idx.append(order)
        out_d.append([d[i] for i in order])
    return np.array(out_idx), np.array(out_d)


def zoh_mp(a, b, delta, dps=50):
    """Exact ZOH in high precision: (exp(a d), (exp(a d) - 1) / a * b)."""
    with mpmath.workdps(dps):
        a, b, delta = mpmath.mpf(a), mpmath.mpf(b), mpmath.mpf(delta)
        abar = mpmath.exp(a * delta)
        if a == 0:
            bbar = delta * b
        else:
            bbar = mpmath.expm1(a * delta) / a * b
        return float(abar), float(bbar)


def ssm_scan_loops(x, delta, b, c, a):
    """Eq-by-eq sequential scan for one sequence: x, delta (T, E); b, c (T, S); a (E, S)."""
    t_len, e_len = x.shape
    s_len = a.shape[1]
    y = np.zeros((t_len, e_len))
    for e in range(e_len):
        h = [0.0] * s_len
        for t in range(t_len):
            acc = 0.0
            for s in range(s_len):
                av, dv = float(a[e, s]), float(delta[t, e])
                abar = math.exp(av * dv)
                bbar = (math.expm1(av * dv) / av if av * dv != 0 else dv) * float(b[t, s])
                h[s] = abar * h[s] + bbar * float(x[t, e])
                acc += float(c[t, s]) * h[s]
            y[t, e] = acc
    return y


def emd_bruteforce(p, q):
    """Minimum mean matching cost over all permutations (tiny sets only)."""
    p, q = np.asarray(p, float), np.asarray(q, float)
    n = len(p)
    best = math.inf
    for perm in itertools.permutations(range(n)):
        cost = sum(math.dist(p[i], q[j]) for i, j in enumerate(perm))
        best = min(best, cost)
    return best / n


def chamfer_loops(p, q):
    def side(a, b):
        return sum(min(sum((x - y) ** 2 for x, y in zip(u, v)) for v in b) for u in a) / len(a)
    return side(p, q) + side(q, p)


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar function f with respect to the array x (in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))
