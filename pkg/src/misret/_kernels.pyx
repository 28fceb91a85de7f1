# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled counterparts of ``misret._pykernels``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def returns_to_go(rewards, double gamma):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] r = np.ascontiguousarray(rewards, dtype=np.float64)
    cdef Py_ssize_t n = r.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double acc = 0.0
    cdef Py_ssize_t t
    for t in range(n - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def expectile_fit(values, double alpha):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] x = np.sort(np.asarray(values, dtype=np.float64))
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t i, k
    cdef double total = 0.0, below_sum = 0.0, above_sum, w, m, lo, hi
    cdef double inf = float("inf")
    for i in range(n):
        total += x[i]
    for k in range(n + 1):
        above_sum = total - below_sum
        w = (1.0 - alpha) * k + alpha * (n - k)
        m = ((1.0 - alpha) * below_sum + alpha * above_sum) / w
        lo = x[k - 1] if k > 0 else -inf
        hi = x[k] if k < n else inf
        if lo <= m <= hi:
            return m
        if k < n:
            below_sum += x[k]
    return x[n - 1]


def mf_sgd(cnp.int64_t[:] rows, cnp.int64_t[:] cols, double[:] vals,
           double[:, :] P, double[:, :] Q, double lr, double reg, int epochs,
           cnp.int64_t[:, :] order):
    cdef Py_ssize_t rank = P.shape[1]
    cdef Py_ssize_t e, j, f, idx, u, i
    cdef double pred, err, pu, qi
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
    return np.asarray(P), np.asarray(Q)
