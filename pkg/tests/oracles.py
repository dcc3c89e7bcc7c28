"""Independent reference computations used by the test-suite.

Nothing here imports the package under test.
"""

import itertools
import math

import numpy as np


def alignment_paths(n, m):
    """All monotone warping paths from (0, 0) to (n - 1, m - 1)."""
    def walk(i, j):
        if (i, j) == (n - 1, m - 1):
            yield ((i, j),)
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            ni, nj = i + di, j + dj
            if ni < n and nj < m:
                for rest in walk(ni, nj):
                    yield ((i, j),) + rest
    return list(walk(0, 0))


def hard_dtw_enum(a, b):
    a = np.asarray(a, dtype=float).reshape(len(a), -1)
    b = np.asarray(b, dtype=float).reshape(len(b), -1)
    best = math.inf
    for path in alignment_paths(len(a), len(b)):
        cost = sum(float(np.sum((a[i] - b[j]) ** 2)) for i, j in path)
        best = min(best, cost)
    return best


def soft_dtw_enum(a, b, gamma):
    """Soft-DTW as -gamma log sum over all paths of exp(-cost / gamma)."""
    a = np.asarray(a, dtype=float).reshape(len(a), -1)
    b = np.asarray(b, dtype=float).reshape(len(b), -1)
    costs = np.array([
        sum(float(np.sum((a[i] - b[j]) ** 2)) for i, j in path) for path in alignment_paths(len(a), len(b))
    ])
    lo = costs.min()
    return lo - gamma * math.log(np.sum(np.exp(-(costs - lo) / gamma)))


def central_difference(fn, x, step=1e-5):
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    for idx in itertools.product(*(range(s) for s in x.shape)):
        up, down = x.copy(), x.copy()
        up[idx] += step
        down[idx] -= step
        grad[idx] = (fn(up) - fn(down)) / (2 * step)
    return grad


def rel_error(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


def ade_fde_loops(pred, truth):
    """Best-of-samples ADE/FDE with explicit loops. ``pred`` is (S, N, T, 2)."""
    best_ade, best_fde = math.inf, math.inf
    for s in range(len(pred)):
        total, final = 0.0, 0.0
        n, t = len(truth), len(truth[0])
        for i in range(n):
            for k in range(t):
                dx = pred[s][i][k][0] - truth[i][k][0]
                dy = pred[s][i][k][1] - truth[i][k][1]
                d = math.sqrt(dx * dx + dy * dy)
                total += d
                if k == t - 1:
                    final += d
        best_ade = min(best_ade, total / (n * t))
        best_fde = min(best_fde, final / n)
    return best_ade, best_fde
