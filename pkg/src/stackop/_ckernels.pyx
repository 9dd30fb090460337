# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled Monte-Carlo kernels (see _pykernels for the reference semantics)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()


def haar_wiener(const double[:, :] dw, Py_ssize_t lo, Py_ssize_t mid, Py_ssize_t hi, double amp):
    cdef Py_ssize_t n_paths = dw.shape[0]
    cdef Py_ssize_t p, m
    cdef double a, b
    out = np.empty(n_paths)
    cdef double[:] o = out
    for p in range(n_paths):
        a = 0.0
        b = 0.0
        for m in range(lo, mid):
            a += dw[p, m]
        for m in range(mid, hi):
            b += dw[p, m]
        o[p] = amp * (a - b)
    return out


cdef double _fact_sqrt(long n):
    cdef double f = 1.0
    cdef long i
    for i in range(2, n + 1):
        f *= i
    return sqrt(f)


def hermite_chaos(const double[:, :] xi, degrees):
    cdef Py_ssize_t n_paths = xi.shape[0]
    cdef Py_ssize_t n_cols = xi.shape[1]
    cdef const long[:] deg = np.asarray(degrees, dtype=np.int_)
    out = np.ones(n_paths)
    cdef double[:] o = out
    cdef Py_ssize_t p, c
    cdef long i
    cdef double x, h_prev, h, h_next, scale
    for c in range(n_cols):
        scale = _fact_sqrt(deg[c])
        for p in range(n_paths):
            x = xi[p, c]
            if deg[c] == 0:
                h = 1.0
            else:
                h_prev = 1.0
                h = x
                for i in range(1, deg[c]):
                    h_next = (x * h - h_prev) / (i + 1)
                    h_prev = h
                    h = h_next
            o[p] *= scale * h
    return out


def gram_separable(const double[:, :] time_profiles, const double[:, :] chaos, double dt):
    cdef Py_ssize_t n = time_profiles.shape[0]
    cdef Py_ssize_t n_steps = time_profiles.shape[1]
    cdef Py_ssize_t n_paths = chaos.shape[1]
    gram = np.empty((n, n))
    se = np.empty((n, n))
    cdef double[:, :] g = gram
    cdef double[:, :] s = se
    cdef Py_ssize_t a, b, p, m
    cdef double t_ab, m1, m2, y, var
    for a in range(n):
        for b in range(a, n):
            t_ab = 0.0
            for m in range(n_steps):
                t_ab += time_profiles[a, m] * time_profiles[b, m]
            t_ab *= dt
            m1 = 0.0
            m2 = 0.0
            for p in range(n_paths):
                y = chaos[a, p] * chaos[b, p]
                m1 += y
                m2 += y * y
            m1 /= n_paths
            m2 /= n_paths
            var = m2 - m1 * m1
            if var < 0.0:
                var = 0.0
            if n_paths > 1:
                var *= n_paths / (n_paths - 1.0)
            g[a, b] = t_ab * m1
            g[b, a] = g[a, b]
            s[a, b] = fabs(t_ab) * sqrt(var / n_paths)
            s[b, a] = s[a, b]
    return gram, se


def pathwise_inner(const double[:, :, ::1] u, const double[:, :, ::1] v, double dt):
    cdef Py_ssize_t n_paths = u.shape[0]
    cdef Py_ssize_t n = u.shape[1] * u.shape[2]
    out = np.empty(n_paths)
    cdef double[:] o = out
    cdef const double* a
    cdef const double* b
    cdef Py_ssize_t p, i
    cdef double s0, s1, s2, s3
    for p in range(n_paths):
        a = &u[p, 0, 0]
        b = &v[p, 0, 0]
        # four independent accumulators break the add dependency chain
        s0 = s1 = s2 = s3 = 0.0
        i = 0
        while i + 4 <= n:
            s0 += a[i] * b[i]
            s1 += a[i + 1] * b[i + 1]
            s2 += a[i + 2] * b[i + 2]
            s3 += a[i + 3] * b[i + 3]
            i += 4
        while i < n:
            s0 += a[i] * b[i]
            i += 1
        o[p] = ((s0 + s1) + (s2 + s3)) * dt
    return out
