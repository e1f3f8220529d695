# cython: boundscheck=False, wraparound=False, cdivision=True
"""Cython CTC forward-backward kernel (compiled backend)."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, expm1, isinf, log, log1p

cnp.import_array()

cdef double NEG_INF = float("-inf")


cdef inline double logaddexp2_(double a, double b) nogil:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a < b:
        a, b = b, a
    return a + log1p(exp(b - a))


def ctc_forward_backward(cnp.ndarray[cnp.float64_t, ndim=2] log_probs,
                         targets, int blank):
    """Same contract as the pure-python kernel."""
    cdef cnp.ndarray[cnp.int64_t, ndim=1] tgt = \
        np.ascontiguousarray(targets, dtype=np.int64)
    cdef int T = log_probs.shape[0]
    cdef int K = log_probs.shape[1]
    cdef int L = tgt.shape[0]
    cdef int S = 2 * L + 1
    cdef cnp.ndarray[cnp.int64_t, ndim=1] ext = np.full(S, blank, dtype=np.int64)
    ext[1::2] = tgt
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] can_skip = np.zeros(S, dtype=np.uint8)
    cdef int s, t
    for s in range(2, S):
        if ext[s] != blank and ext[s] != ext[s - 2]:
            can_skip[s] = 1

    cdef cnp.ndarray[cnp.float64_t, ndim=2] alpha = np.full((T, S), NEG_INF)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] beta = np.full((T, S), NEG_INF)
    cdef double a, nxt, log_z

    alpha[0, 0] = log_probs[0, ext[0]]
    if S > 1:
        alpha[0, 1] = log_probs[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            a = alpha[t - 1, s]
            if s >= 1:
                a = logaddexp2_(a, alpha[t - 1, s - 1])
            if s >= 2 and can_skip[s]:
                a = logaddexp2_(a, alpha[t - 1, s - 2])
            alpha[t, s] = a + log_probs[t, ext[s]]

    log_z = alpha[T - 1, S - 1]
    if S > 1:
        log_z = logaddexp2_(log_z, alpha[T - 1, S - 2])
    if isinf(log_z):
        return float("inf"), np.zeros((T, K))

    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        for s in range(S):
            nxt = beta[t + 1, s] + log_probs[t + 1, ext[s]]
            if s + 1 < S:
                nxt = logaddexp2_(
                    nxt, beta[t + 1, s + 1] + log_probs[t + 1, ext[s + 1]])
            if s + 2 < S and can_skip[s + 2]:
                nxt = logaddexp2_(
                    nxt, beta[t + 1, s + 2] + log_probs[t + 1, ext[s + 2]])
            beta[t, s] = nxt

    cdef cnp.ndarray[cnp.float64_t, ndim=2] grad = np.zeros((T, K))
    cdef double g
    for t in range(T):
        for s in range(S):
            g = alpha[t, s] + beta[t, s] - log_z
            if g > -700.0:
                grad[t, ext[s]] -= exp(g)
    return -log_z, grad
