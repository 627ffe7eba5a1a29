# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled memory-bank kernels.

All functions write into caller-allocated output arrays. Inputs are assumed
validated (C-contiguous, matching dtypes, indices in range) by the Python
wrapper in :mod:`mcl_okd.kernels`.
"""
from libc.math cimport sqrt
from libc.stdint cimport int64_t

ctypedef fused real:
    float
    double


def gather_dot(const real[:, ::1] anchors, const real[:, ::1] bank,
               const int64_t[:, ::1] idx, real[:, ::1] out):
    cdef Py_ssize_t B = idx.shape[0], K = idx.shape[1], d = anchors.shape[1]
    cdef Py_ssize_t b, k, t
    cdef int64_t j
    cdef real acc
    with nogil:
        for b in range(B):
            for k in range(K):
                j = idx[b, k]
                acc = 0
                for t in range(d):
                    acc = acc + anchors[b, t] * bank[j, t]
                out[b, k] = acc


def gather_weighted_sum(const real[:, ::1] weights, const real[:, ::1] bank,
                        const int64_t[:, ::1] idx, real[:, ::1] out):
    cdef Py_ssize_t B = idx.shape[0], K = idx.shape[1], d = bank.shape[1]
    cdef Py_ssize_t b, k, t
    cdef int64_t j
    cdef real w
    with nogil:
        for b in range(B):
            for t in range(d):
                out[b, t] = 0
            for k in range(K):
                j = idx[b, k]
                w = weights[b, k]
                for t in range(d):
                    out[b, t] = out[b, t] + w * bank[j, t]


def momentum_update(real[:, ::1] bank, const int64_t[::1] idx,
                    const real[:, ::1] values, double rho):
    cdef Py_ssize_t n = idx.shape[0], d = bank.shape[1]
    cdef Py_ssize_t i, t
    cdef int64_t j
    cdef double acc, norm, x
    with nogil:
        for i in range(n):
            j = idx[i]
            acc = 0.0
            for t in range(d):
                x = (1.0 - rho) * bank[j, t] + rho * values[i, t]
                bank[j, t] = <real>x
                acc = acc + x * x
            norm = sqrt(acc)
            if norm > 0.0:
                for t in range(d):
                    bank[j, t] = <real>(bank[j, t] / norm)
            else:
                # old row was exactly -v; fall back to the new value
                acc = 0.0
                for t in range(d):
                    acc = acc + values[i, t] * values[i, t]
                norm = sqrt(acc)
                for t in range(d):
                    bank[j, t] = <real>(values[i, t] / norm)
