"""Independent reference implementations used only by the tests.

Nothing here imports from cirm.  Everything is plain Python loops so it
shares no code path (numpy ranking, scipy) with the implementation under test.
"""

from __future__ import annotations

import math


def average_ranks(xs):
    """1-based ranks; tied values share the mean of the positions they occupy."""
    n = len(xs)
    ranks = [0.0] * n
    for i in range(n):
        less = sum(1 for j in range(n) if xs[j] < xs[i])
        equal = sum(1 for j in range(n) if xs[j] == xs[i])
        # positions less+1 .. less+equal, averaged
        ranks[i] = less + (equal + 1) / 2.0
    return ranks


def pearson(xs, ys):
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    sxx = sum((x - mx) ** 2 for x in xs)
    syy = sum((y - my) ** 2 for y in ys)
    if sxx == 0 or syy == 0:
        return None
    return sxy / math.sqrt(sxx * syy)


def spearman_bruteforce(xs, ys):
    return pearson(average_ranks(list(xs)), average_ranks(list(ys)))


def median(values):
    v = sorted(values)
    n = len(v)
    return v[n // 2] if n % 2 else (v[n // 2 - 1] + v[n // 2]) / 2.0


def tricube_wls_at(xs, ys, x0, frac):
    """Local linear fit at x0: nearest ceil(frac*n) points define the bandwidth.

    Solves the 2x2 weighted normal equations directly.
    """
    n = len(xs)
    span = max(2, math.ceil(frac * n))
    d = sorted(abs(x - x0) for x in xs)
    h = d[span - 1]
    w = []
    for x in xs:
        u = abs(x - x0) / h if h > 0 else (0.0 if x == x0 else 1.0)
        w.append((1 - min(u, 1.0) ** 3) ** 3)
    s0 = sum(w)
    s1 = sum(wi * x for wi, x in zip(w, xs))
    s2 = sum(wi * x * x for wi, x in zip(w, xs))
    t0 = sum(wi * y for wi, y in zip(w, ys))
    t1 = sum(wi * x * y for wi, x, y in zip(w, xs, ys))
    det = s0 * s2 - s1 * s1
    if abs(det) < 1e-12 * max(1.0, s0 * s2):
        return t0 / s0
    b = (s0 * t1 - s1 * t0) / det
    a = (t0 - b * s1) / s0
    return a + b * x0


def tricube_weighted_mean(xs, ys, x0, frac):
    n = len(xs)
    span = max(2, math.ceil(frac * n))
    h = sorted(abs(x - x0) for x in xs)[span - 1]
    w = [(1 - min(abs(x - x0) / h, 1.0) ** 3) ** 3 for x in xs]
    return sum(wi * y for wi, y in zip(w, ys)) / sum(w)
