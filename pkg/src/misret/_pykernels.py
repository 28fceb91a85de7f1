"""Pure-Python implementations of the numeric kernels.

These mirror ``_kernels.pyx`` line for line and are used when the compiled
extension is unavailable or ``MISRET_PURE=1`` is set.
"""
from __future__ import annotations

import numpy as np


def returns_to_go(rewards, gamma):
    r = np.asarray(rewards, dtype=np.float64)
    n = r.shape[0]
    out = np.empty(n, dtype=np.float64)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def expectile_fit(values, alpha):
    """Exact minimiser of the mean asymmetric squared loss over a scalar.

    The loss is piecewise quadratic with breakpoints at the sorted values, so
    the minimiser is the weighted mean of the segment whose weights are
    consistent with it.
    """
    x = np.sort(np.asarray(values, dtype=np.float64))
    n = x.shape[0]
    # Prefix sums let each segment's weighted mean be formed in O(1).
    total = 0.0
    for i in range(n):
        total += x[i]
    below_sum = 0.0
    for k in range(n + 1):
        # k values strictly below m (weight 1 - alpha), n - k at or above (weight alpha)
        above_sum = total - below_sum
        w = (1.0 - alpha) * k + alpha * (n - k)
        m = ((1.0 - alpha) * below_sum + alpha * above_sum) / w
        lo = x[k - 1] if k > 0 else -np.inf
        hi = x[k] if k < n else np.inf
        if lo <= m <= hi:
            return m
        if k < n:
            below_sum += x[k]
    return x[n - 1]


def mf_sgd(rows, cols, vals, P, Q, lr, reg, epochs, order):
    """In-place SGD over observed entries; ``order`` is (epochs, nnz) visit order."""
    rank = P.shape[1]
    for e in range(epochs):
        for j in range(order.shape[1]):
            idx = order[e, j]
            u = rows[idx]
            i = cols[idx]
            pred = 0.0
            for f in range(rank):
                pred += P[u, f] * Q[i, f]
            err = vals[idx] - pred
            for f in range(rank):
                pu = P[u, f]
                qi = Q[i, f]
                P[u, f] = pu + lr * (err * qi - reg * pu)
                Q[i, f] = qi + lr * (err * pu - reg * qi)
    return P, Q
