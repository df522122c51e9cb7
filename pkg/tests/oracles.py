"""Independent brute-force reference computations used by the test suite.

These deliberately avoid the package's fast paths: plain loops, explicit
inverses, every permutation, every split.
"""

import itertools
import math

import numpy as np


def lml_direct(x, y, lengthscales, output_variance, noise_variance):
    """Textbook log marginal likelihood with an explicit inverse and slogdet."""
    n = len(y)
    k = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            r = (x[i] - x[j]) / lengthscales
            k[i, j] = output_variance * math.exp(-0.5 * float(r @ r))
    c = k + noise_variance * np.eye(n)
    sign, logdet = np.linalg.slogdet(c)
    assert sign > 0
    return float(-0.5 * y @ np.linalg.solve(c, y) - 0.5 * logdet - 0.5 * n * math.log(2 * math.pi))


def central_difference(f, theta, h=1e-5):
    theta = np.asarray(theta, dtype=float)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        grad[i] = (f(up) - f(dn)) / (2 * h)
    return grad


def permutation_shapley(model, x, background):
    """Shapley values by averaging marginal contributions over all d! orderings."""
    x = np.asarray(x, dtype=float)
    bg = np.atleast_2d(background)
    d = x.size

    cache = {}

    def value(subset):
        key = frozenset(subset)
        if key not in cache:
            hybrid = bg.copy()
            idx = list(key)
            hybrid[:, idx] = x[idx]
            cache[key] = float(np.mean(model(hybrid)))
        return cache[key]

    phi = np.zeros(d)
    perms = list(itertools.permutations(range(d)))
    for order in perms:
        present = []
        prev = value(present)
        for j in order:
            present.append(j)
            cur = value(present)
            phi[j] += cur - prev
            prev = cur
    return value([]), phi / len(perms)


def all_split_gains(x, r, l2=0.0):
    """Every candidate ``(gain, feature, threshold)`` in feature, threshold order."""
    n, d = x.shape
    g = float(np.sum(r))
    parent = g * g / (n + l2) if n + l2 > 0 else 0.0
    out = []
    for j in range(d):
        values = np.unique(x[:, j])
        for lo, hi in zip(values[:-1], values[1:]):
            thr = lo + (hi - lo) / 2
            left = x[:, j] < thr
            gl, nl = float(np.sum(r[left])), int(left.sum())
            gr, nr = g - gl, n - nl
            out.append((0.5 * (gl * gl / (nl + l2) + gr * gr / (nr + l2) - parent), j, thr))
    return out


def best_split_bruteforce(x, r, l2=0.0):
    """Exhaustive (feature, threshold) search with the squared-loss gain.

    Returns ``(gain, feature, threshold)`` or ``None`` if no split has positive
    gain. Thresholds are midpoints between consecutive distinct values.
    """
    best = None
    for cand in all_split_gains(x, r, l2):
        if best is None or cand[0] > best[0] + 1e-12:
            best = cand
    if best is None or best[0] <= 1e-12 * max(1.0, float(r @ r)):
        return None
    return best


def rmse_loop(a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    total = 0.0
    for u, v in zip(a, b):
        total += (u - v) ** 2
    return math.sqrt(total / len(a))


def pearson_loop(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    sab = sum((u - ma) * (v - mb) for u, v in zip(a, b))
    saa = sum((u - ma) ** 2 for u in a)
    sbb = sum((v - mb) ** 2 for v in b)
    return sab / math.sqrt(saa * sbb)
