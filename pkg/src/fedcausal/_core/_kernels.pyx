# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: Gram matrices, RFF feature maps, independent-MH chains."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, cos, sin, sqrt, fabs

cnp.import_array()


def gram_gaussian(const double[:, ::1] a, const double[:, ::1] b, double lengthscale):
    cdef Py_ssize_t n = a.shape[0], p = b.shape[0], d = a.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc, diff
    cdef double scale = 1.0 / (2.0 * lengthscale * lengthscale)
    out = np.empty((n, p), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n):
        for j in range(p):
            acc = 0.0
            for k in range(d):
                diff = a[i, k] - b[j, k]
                acc += diff * diff
            o[i, j] = exp(-acc * scale)
    return out


def gram_laplacian(const double[:, ::1] a, const double[:, ::1] b, double lengthscale):
    cdef Py_ssize_t n = a.shape[0], p = b.shape[0], d = a.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc
    cdef double inv = 1.0 / lengthscale
    out = np.empty((n, p), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n):
        for j in range(p):
            acc = 0.0
            for k in range(d):
                acc += fabs(a[i, k] - b[j, k])
            o[i, j] = exp(-acc * inv)
    return out


def rff_features(const double[:, ::1] u, const double[:, ::1] freqs):
    cdef Py_ssize_t n = u.shape[0], nb = freqs.shape[0], d = u.shape[1]
    cdef Py_ssize_t i, b, k
    cdef double proj
    cdef double norm = 1.0 / sqrt(<double>nb)
    out = np.empty((n, 2 * nb), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n):
        for b in range(nb):
            proj = 0.0
            for k in range(d):
                proj += freqs[b, k] * u[i, k]
            o[i, b] = cos(proj) * norm
            o[i, nb + b] = sin(proj) * norm
    return out


def independent_mh_chain(const double[::1] log_weight, const double[::1] log_u):
    """Run one independent-proposal MH chain over precomputed proposals.

    ``log_weight[t]`` is ``log pi(z_t) - log q(z_t)`` for proposal ``t``; the
    chain starts at proposal 0 and ``log_u[t]`` decides step ``t`` (entry 0 is
    unused). Returns the index of the state held after each step and the
    number of accepted moves.
    """
    cdef Py_ssize_t steps = log_weight.shape[0]
    cdef Py_ssize_t t, cur = 0
    cdef long accepted = 0
    idx = np.empty(steps, dtype=np.int64)
    cdef cnp.int64_t[::1] out = idx
    out[0] = 0
    for t in range(1, steps):
        if log_u[t] < log_weight[t] - log_weight[cur]:
            cur = t
            accepted += 1
        out[t] = cur
    return idx, accepted


def independent_mh_chains(const double[:, ::1] log_weight, const double[:, ::1] log_u):
    """Vectorised variant: one chain per row, returns the final state index per row."""
    cdef Py_ssize_t chains = log_weight.shape[0], steps = log_weight.shape[1]
    cdef Py_ssize_t c, t, cur
    cdef long accepted = 0
    final = np.empty(chains, dtype=np.int64)
    cdef cnp.int64_t[::1] out = final
    for c in range(chains):
        cur = 0
        for t in range(1, steps):
            if log_u[c, t] < log_weight[c, t] - log_weight[c, cur]:
                cur = t
                accepted += 1
        out[c] = cur
    return final, accepted
