"""Independent reference computations used by the tests.

Everything here is written from the textbook definitions in plain Python
(high-precision decimals, explicit loops, full enumeration) and shares no
code with the package.
"""

from decimal import Decimal, getcontext
from itertools import combinations, product

getcontext().prec = 60


def _dec(xs):
    return [Decimal(repr(float(x))) for x in xs]


def pearson(x, y):
    x, y = _dec(x), _dec(y)
    n = Decimal(len(x))
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    if sxx == 0 or syy == 0:
        return None
    return float(sxy / (sxx * syy).sqrt())


def population_cov(x, y):
    """Double-loop form: cov = (1 / 2n^2) sum_ij (x_i - x_j)(y_i - y_j)."""
    x, y = _dec(x), _dec(y)
    n = len(x)
    total = Decimal(0)
    for i in range(n):
        for j in range(n):
            total += (x[i] - x[j]) * (y[i] - y[j])
    return float(total / (2 * n * n))


def mwu_exact(a, b):
    """(U_a, P(U <= U_a), P(U >= U_a)) by listing every split of the pooled ranks."""
    pooled = sorted(list(a) + list(b))
    rank = {v: i + 1 for i, v in enumerate(pooled)}
    n1 = len(a)
    u_obs = sum(rank[v] for v in a) - n1 * (n1 + 1) / 2
    us = [sum(c) - n1 * (n1 + 1) / 2 for c in combinations(range(1, len(pooled) + 1), n1)]
    le = sum(1 for u in us if u <= u_obs + 1e-9) / len(us)
    ge = sum(1 for u in us if u >= u_obs - 1e-9) / len(us)
    return u_obs, le, ge


def midranks(values):
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def wilcoxon_exact(diffs):
    """(T+, P(T <= t), P(T >= t)) over all 2^n sign patterns of the nonzero |d| ranks."""
    d = [x for x in diffs if x != 0]
    r = midranks([abs(x) for x in d])
    t_obs = sum(rk for rk, x in zip(r, d) if x > 0)
    ts = [sum(rk for rk, s in zip(r, signs) if s) for signs in product((False, True), repeat=len(d))]
    le = sum(1 for t in ts if t <= t_obs + 1e-9) / len(ts)
    ge = sum(1 for t in ts if t >= t_obs - 1e-9) / len(ts)
    return t_obs, le, ge
