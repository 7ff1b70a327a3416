# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled scoring kernels. Mirrors ``_pykernels`` exactly in contract."""

import numpy as np
cimport numpy as cnp
from libc.math cimport log

cnp.import_array()

BACKEND = "cython"

ctypedef fused real_t:
    float
    double


cdef inline double _h(double p) noexcept nogil:
    cdef double q = 1.0 - p
    cdef double out = 0.0
    if p > 0.0:
        out -= p * log(p)
    if q > 0.0:
        out -= q * log(q)
    return out


def entropy(p):
    cdef double[::1] flat = np.ascontiguousarray(p, dtype=np.float64).ravel()
    out = np.empty(flat.shape[0])
    cdef double[::1] o = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(flat.shape[0]):
            o[i] = _h(flat[i])
    return out.reshape(np.shape(p))


cdef void _window_sum(double[:, ::1] a, int r, double[:, ::1] out,
                      double[:, ::1] cols, double[::1] pre) noexcept nogil:
    cdef Py_ssize_t h = a.shape[0], w = a.shape[1]
    cdef Py_ssize_t i, j, lo, hi
    # row pass: window sums along each row, stored as running column prefixes
    for j in range(w):
        cols[0, j] = 0.0
    for i in range(h):
        pre[0] = 0.0
        for j in range(w):
            pre[j + 1] = pre[j] + a[i, j]
        for j in range(w):
            lo = j - r if j - r > 0 else 0
            hi = j + r + 1 if j + r + 1 < w else w
            cols[i + 1, j] = cols[i, j] + (pre[hi] - pre[lo])
    # column pass, row-major over the prefix rows
    for i in range(h):
        lo = i - r if i - r > 0 else 0
        hi = i + r + 1 if i + r + 1 < h else h
        for j in range(w):
            out[i, j] = cols[hi, j] - cols[lo, j]


cdef inline double _count(Py_ssize_t i, Py_ssize_t j, Py_ssize_t h, Py_ssize_t w, int r) noexcept nogil:
    cdef Py_ssize_t rlo = i - r if i - r > 0 else 0
    cdef Py_ssize_t rhi = i + r + 1 if i + r + 1 < h else h
    cdef Py_ssize_t clo = j - r if j - r > 0 else 0
    cdef Py_ssize_t chi = j + r + 1 if j + r + 1 < w else w
    return <double>((rhi - rlo) * (chi - clo))


def box_mean(a, int r, bint fixed_denominator=False):
    cdef double[:, ::1] src = np.ascontiguousarray(a, dtype=np.float64)
    cdef Py_ssize_t h = src.shape[0], w = src.shape[1], i, j
    out = np.empty((h, w))
    cdef double[:, ::1] o = out
    cdef double[:, ::1] rows = np.empty((h + 1, w))
    cdef double[::1] pre = np.empty(max(h, w) + 1)
    cdef double full = <double>((2 * r + 1) * (2 * r + 1))
    with nogil:
        _window_sum(src, r, o, rows, pre)
        for i in range(h):
            for j in range(w):
                o[i, j] = o[i, j] / (full if fixed_denominator else _count(i, j, h, w, r))
    return out


def proposed_branch(p, int r, bint fixed_denominator=False):
    """Raw per-branch score: entropy of the window mean minus window mean of entropies."""
    cdef double[:, ::1] src = np.ascontiguousarray(p, dtype=np.float64)
    cdef Py_ssize_t h = src.shape[0], w = src.shape[1], i, j
    out = np.zeros((h, w))
    if r == 0:
        return out
    cdef double[:, ::1] o = out
    cdef double[:, ::1] ent = np.empty((h, w))
    cdef double[:, ::1] psum = np.empty((h, w))
    cdef double[:, ::1] rows = np.empty((h + 1, w))
    cdef double[::1] pre = np.empty(max(h, w) + 1)
    cdef double full = <double>((2 * r + 1) * (2 * r + 1))
    cdef double den
    with nogil:
        for i in range(h):
            for j in range(w):
                ent[i, j] = _h(src[i, j])
        _window_sum(src, r, psum, rows, pre)
        _window_sum(ent, r, o, rows, pre)
        for i in range(h):
            for j in range(w):
                den = full if fixed_denominator else _count(i, j, h, w, r)
                o[i, j] = _h(psum[i, j] / den) - o[i, j] / den
    return out
