"""Slow, independent reference implementations used as test oracles.

Nothing here imports from the package. Loops and scalar arithmetic are
deliberate: each routine follows the textbook definition as literally as
possible so it can be checked by eye.
"""

from __future__ import annotations

import math

import mpmath


def pinball(p, q, y):
    z = y - q
    return z * p if z >= 0 else z * (p - 1)


def noncentral_beta_cdf(x, a, b, c, terms=200, dps=40):
    """Poisson mixture of incomplete beta functions in high precision."""
    with mpmath.workdps(dps):
        lam = mpmath.mpf(c) / 2
        total = mpmath.mpf(0)
        for j in range(terms):
            w = mpmath.exp(-lam) * lam**j / mpmath.factorial(j)
            total += w * mpmath.betainc(a + j, b, 0, x, regularized=True)
        return float(total)


def bspline(i, k, t, x):
    """Cox-de Boor recursion for a single basis function, left-closed intervals."""
    if k == 0:
        return 1.0 if t[i] <= x < t[i + 1] else 0.0
    left = 0.0
    if t[i + k] > t[i]:
        left = (x - t[i]) / (t[i + k] - t[i]) * bspline(i, k - 1, t, x)
    right = 0.0
    if t[i + k + 1] > t[i + 1]:
        right = (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * bspline(i + 1, k - 1, t, x)
    return left + right


def student_t_two_sided(stat, df):
    """Two-sided tail probability of Student's t via the incomplete beta function."""
    with mpmath.workdps(30):
        x = mpmath.mpf(df) / (df + mpmath.mpf(stat) ** 2)
        return float(mpmath.betainc(mpmath.mpf(df) / 2, mpmath.mpf(1) / 2, 0, x, regularized=True))


def dm_statistic(model, ref):
    """Harvey-adjusted DM statistic at horizon one from per-day lists of per-marginal losses."""
    T = len(model)
    d = []
    for lm, lr in zip(model, ref):
        d.append(sum(abs(v) for v in lr) - sum(abs(v) for v in lm))
    mean = sum(d) / T
    gamma0 = sum((x - mean) ** 2 for x in d) / T
    dm = mean / math.sqrt(gamma0 / T)
    return math.sqrt((T + 1 - 2 + 0) / T) * dm


def _xlogy(x, y):
    return 0.0 if x == 0 else x * math.log(y)


def kupiec_lr(x, n, alpha):
    null = _xlogy(n - x, 1 - alpha) + _xlogy(x, alpha)
    phat = x / n
    alt = _xlogy(n - x, 1 - phat) + _xlogy(x, phat)
    return -2 * (null - alt)


def chi2_sf_1(lr):
    return math.erfc(math.sqrt(lr / 2))


def christoffersen(seq, alpha):
    """``(lr_uc, lr_ind, lr_cc)`` by counting transitions in a plain loop."""
    n = len(seq)
    x = sum(seq)
    lr_uc = kupiec_lr(x, n, alpha)
    counts = {(0, 0): 0, (0, 1): 0, (1, 0): 0, (1, 1): 0}
    for a, b in zip(seq[:-1], seq[1:]):
        counts[(a, b)] += 1
    n00, n01, n10, n11 = counts[(0, 0)], counts[(0, 1)], counts[(1, 0)], counts[(1, 1)]
    from0, from1 = n00 + n01, n10 + n11
    p01 = n01 / from0 if from0 else 0.0
    p11 = n11 / from1 if from1 else 0.0
    p = (n01 + n11) / (n - 1)
    l_markov = _xlogy(n00, 1 - p01) + _xlogy(n01, p01) + _xlogy(n10, 1 - p11) + _xlogy(n11, p11)
    l_iid = _xlogy(n00 + n10, 1 - p) + _xlogy(n01 + n11, p)
    lr_ind = -2 * (l_iid - l_markov)
    return lr_uc, lr_ind, lr_uc + lr_ind


def pearson(xs, ys):
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(xs, ys))
    sxx = sum((a - mx) ** 2 for a in xs)
    syy = sum((b - my) ** 2 for b in ys)
    return sxy / math.sqrt(sxx * syy)


def boa_cell(experts, ys, p, theta=0.0, gamma=1.0, ceiling=1e6):
    """Single-cell Bernstein online aggregation with scalar loops.

    ``experts`` is a list over time of per-expert quantile forecasts at
    probability ``p``. Returns the per-step weight vectors used for prediction.
    """
    K = len(experts[0])
    b0 = 1.0 / K
    w = [b0] * K
    R, V, E = [0.0] * K, [0.0] * K, [0.0] * K
    used = []
    for xs, y in zip(experts, ys):
        used.append(list(w))
        comb = sum(wk * xk for wk, xk in zip(w, xs))
        g = (1.0 if comb > y else 0.0) - p
        r = [g * (comb - xk) for xk in xs]
        eta = []
        for k in range(K):
            V[k] = (1 - theta) * V[k] + r[k] ** 2
            E[k] = max((1 - theta) * E[k], abs(r[k]))
        for k in range(K):
            a = math.sqrt(-math.log(b0) / V[k]) if V[k] > 0 else math.inf
            b = 1 / (2 * E[k]) if E[k] > 0 else math.inf
            eta.append(gamma * min(a, b))
        finite = [e for e in eta if math.isfinite(e)]
        fill = max(finite) if finite else gamma * ceiling
        eta = [e if math.isfinite(e) else fill for e in eta]
        for k in range(K):
            R[k] = (1 - theta) * R[k] + r[k] * (1 - eta[k] * r[k]) / 2 + E[k] * (2 * eta[k] * r[k] > 1)
        z = [eta[k] * R[k] + math.log(eta[k]) for k in range(K)]
        m = max(z)
        ez = [math.exp(v - m) for v in z]
        s = sum(ez)
        w = [K * b0 * e / s for e in ez]
    return used
