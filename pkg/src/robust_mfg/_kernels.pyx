# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the loops in ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()


cdef struct Node:
    double pos
    double drop


cdef inline void _push_min(Node* h, Py_ssize_t* n, double pos, double drop) nogil:
    cdef Py_ssize_t i = n[0]
    cdef Py_ssize_t parent
    n[0] += 1
    while i > 0:
        parent = (i - 1) >> 1
        if h[parent].pos <= pos:
            break
        h[i] = h[parent]
        i = parent
    h[i].pos = pos
    h[i].drop = drop


cdef inline Node _pop_min(Node* h, Py_ssize_t* n) nogil:
    cdef Node top = h[0]
    cdef Node last
    cdef Py_ssize_t i = 0
    cdef Py_ssize_t child
    n[0] -= 1
    last = h[n[0]]
    while True:
        child = 2 * i + 1
        if child >= n[0]:
            break
        if child + 1 < n[0] and h[child + 1].pos < h[child].pos:
            child += 1
        if h[child].pos >= last.pos:
            break
        h[i] = h[child]
        i = child
    h[i] = last
    return top


def fm_dual_1d(const double[::1] x, const double[::1] w):
    """Same contract as ``_kernels_py.fm_dual_1d``."""
    cdef Py_ssize_t m = x.shape[0]
    if m == 0:
        return 0.0
    cdef Py_ssize_t cap = 3 * m + 4
    cdef Node* left = <Node*> malloc(cap * sizeof(Node))
    cdef Node* right = <Node*> malloc(cap * sizeof(Node))
    if left == NULL or right == NULL:
        free(left)
        free(right)
        raise MemoryError()
    cdef Py_ssize_t nl = 0, nr = 0, i
    cdef double off_l = 0.0, off_r = 0.0, vmax = 0.0
    cdef double d, wi, slope, b, s, nb
    cdef Node top
    with nogil:
        # the left heap stores negated positions so both heaps are min-heaps
        _push_min(left, &nl, 1.0, INFINITY)
        _push_min(right, &nr, 1.0, INFINITY)
        for i in range(m):
            if i > 0:
                d = x[i] - x[i - 1]
                if d > 0.0:
                    off_l -= d
                    off_r += d
                    _push_min(left, &nl, 1.0 + off_l, INFINITY)
                    _push_min(right, &nr, 1.0 - off_r, INFINITY)
            wi = w[i]
            if wi > 0.0:
                vmax += wi * (right[0].pos + off_r)
                slope = wi
                while True:
                    top = _pop_min(right, &nr)
                    b = top.pos + off_r
                    s = top.drop
                    if s >= slope:
                        _push_min(left, &nl, -(b - off_l), slope)
                        if s > slope:
                            _push_min(right, &nr, b - off_r, s - slope)
                        break
                    _push_min(left, &nl, -(b - off_l), s)
                    slope -= s
                    nb = right[0].pos + off_r
                    vmax += slope * (nb - b)
            elif wi < 0.0:
                vmax += wi * (-left[0].pos + off_l)
                slope = -wi
                while True:
                    top = _pop_min(left, &nl)
                    b = -top.pos + off_l
                    s = top.drop
                    if s >= slope:
                        _push_min(right, &nr, b - off_r, slope)
                        if s > slope:
                            _push_min(left, &nl, -(b - off_l), s - slope)
                        break
                    _push_min(right, &nr, b - off_r, s)
                    slope -= s
                    nb = -left[0].pos + off_l
                    vmax += slope * (b - nb)
    free(left)
    free(right)
    return vmax


def euler_paths(const double[:, ::1] x0, const double[:, ::1] drift_const, const double[:, :, ::1] b,
                const double[:, :, ::1] c, const double[:, :, ::1] nu, const double[:, :, :, ::1] sigma,
                const double[:, :, ::1] psi, const double[:, :, ::1] dw, double dt, int r_flag):
    """Same contract as ``_kernels_py.euler_paths``."""
    cdef Py_ssize_t P = x0.shape[0], n = x0.shape[1]
    cdef Py_ssize_t K = dw.shape[1], dd = dw.shape[2]
    out_arr = np.empty((P, K + 1, n))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t p, k, i, j, l
    cdef double acc, vol
    with nogil:
        for p in range(P):
            for i in range(n):
                out[p, 0, i] = x0[p, i]
            for k in range(K):
                for i in range(n):
                    acc = drift_const[k, i]
                    for j in range(n):
                        acc = acc + b[k, i, j] * out[p, k, j] + c[k, i, j] * psi[p, k, j]
                    acc = acc * dt
                    for j in range(dd):
                        vol = nu[k, i, j]
                        if r_flag:
                            for l in range(n):
                                vol = vol + sigma[k, i, j, l] * psi[p, k, l]
                        acc = acc + vol * dw[p, k, j]
                    out[p, k + 1, i] = out[p, k, i] + acc
    return out_arr


def log_density(const double[:, ::1] y_star, const double[:, :, ::1] z_star, const double[:, :, ::1] dw, double dt):
    """Same contract as ``_kernels_py.log_density``."""
    cdef Py_ssize_t P = y_star.shape[0], K = y_star.shape[1], dd = dw.shape[2]
    out_arr = np.zeros((P, K + 1))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t p, k, j
    cdef double inc, zz, zw
    with nogil:
        for p in range(P):
            for k in range(K):
                zz = 0.0
                zw = 0.0
                for j in range(dd):
                    zw = zw + z_star[p, k, j] * dw[p, k, j]
                    zz = zz + z_star[p, k, j] * z_star[p, k, j]
                inc = y_star[p, k] * dt + zw - 0.5 * zz * dt
                out[p, k + 1] = out[p, k] + inc
    return out_arr
