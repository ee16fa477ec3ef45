# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled masked attention kernels.

Fused score/softmax/update loops that visit only the keys admitted by
the mask, so masked keys contribute nothing at all (bit-exact causality)
and no [Lq, Lk] score matrix is materialized. Accumulation runs in
double precision regardless of input dtype.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

BACKEND = "compiled"

ctypedef fused real:
    float
    double


def attention_forward(real[:, :, ::1] q, real[:, :, ::1] k, real[:, :, ::1] v,
                      cnp.uint8_t[:, ::1] allowed, double scale):
    cdef Py_ssize_t R = q.shape[0], Lq = q.shape[1], d = q.shape[2]
    cdef Py_ssize_t Lk = k.shape[1]
    out_arr = np.zeros((R, Lq, d), dtype=np.asarray(q).dtype)
    cdef real[:, :, ::1] out = out_arr
    scratch_arr = np.empty(Lk, dtype=np.float64)
    cdef double[::1] sc = scratch_arr
    cdef Py_ssize_t r, i, j, c, n_allowed
    cdef double m, s, dot, w

    with nogil:
        for r in range(R):
            for i in range(Lq):
                n_allowed = 0
                m = 0.0
                for j in range(Lk):
                    if allowed[i, j]:
                        dot = 0.0
                        for c in range(d):
                            dot += <double> q[r, i, c] * <double> k[r, j, c]
                        dot *= scale
                        sc[j] = dot
                        if n_allowed == 0 or dot > m:
                            m = dot
                        n_allowed += 1
                if n_allowed == 0:
                    continue  # empty row stays zero
                s = 0.0
                for j in range(Lk):
                    if allowed[i, j]:
                        sc[j] = exp(sc[j] - m)
                        s += sc[j]
                for j in range(Lk):
                    if allowed[i, j]:
                        w = sc[j] / s
                        for c in range(d):
                            out[r, i, c] += <real> (w * <double> v[r, j, c])
    return out_arr


def attention_backward(real[:, :, ::1] q, real[:, :, ::1] k, real[:, :, ::1] v,
                       cnp.uint8_t[:, ::1] allowed, double scale,
                       real[:, :, ::1] d_out):
    cdef Py_ssize_t R = q.shape[0], Lq = q.shape[1], d = q.shape[2]
    cdef Py_ssize_t Lk = k.shape[1]
    dtype = np.asarray(q).dtype
    dq_arr = np.zeros((R, Lq, d), dtype=dtype)
    dk_arr = np.zeros((R, Lk, d), dtype=dtype)
    dv_arr = np.zeros((R, Lk, d), dtype=dtype)
    cdef real[:, :, ::1] dq = dq_arr
    cdef real[:, :, ::1] dk = dk_arr
    cdef real[:, :, ::1] dv = dv_arr
    p_arr = np.empty(Lk, dtype=np.float64)
    dp_arr = np.empty(Lk, dtype=np.float64)
    cdef double[::1] p = p_arr
    cdef double[::1] dp = dp_arr
    cdef Py_ssize_t r, i, j, c, n_allowed
    cdef double m, s, dot, inner, ds

    with nogil:
        for r in range(R):
            for i in range(Lq):
                n_allowed = 0
                m = 0.0
                for j in range(Lk):
                    if allowed[i, j]:
                        dot = 0.0
                        for c in range(d):
                            dot += <double> q[r, i, c] * <double> k[r, j, c]
                        dot *= scale
                        p[j] = dot
                        if n_allowed == 0 or dot > m:
                            m = dot
                        n_allowed += 1
                if n_allowed == 0:
                    continue
                s = 0.0
                for j in range(Lk):
                    if allowed[i, j]:
                        p[j] = exp(p[j] - m)
                        s += p[j]
                inner = 0.0
                for j in range(Lk):
                    if allowed[i, j]:
                        p[j] /= s
                        dot = 0.0
                        for c in range(d):
                            dot += <double> d_out[r, i, c] * <double> v[r, j, c]
                        dp[j] = dot
                        inner += p[j] * dot
                for j in range(Lk):
                    if allowed[i, j]:
                        ds = p[j] * (dp[j] - inner) * scale
                        for c in range(d):
                            dq[r, i, c] += <real> (ds * <double> k[r, j, c])
                            dk[r, j, c] += <real> (ds * <double> q[r, i, c])
                            dv[r, j, c] += <real> (p[j] * <double> d_out[r, i, c])
    return dq_arr, dk_arr, dv_arr
