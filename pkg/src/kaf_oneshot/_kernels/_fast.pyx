# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled implementations of the hot kernels.

Layout gather/scatter (im2col, col2im, pooling) and the KAF mixtures run
as plain C loops; the convolution contractions still go through BLAS via
numpy, which is where the flops belong. Contracts match `_ref` exactly.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp as c_exp

cnp.import_array()

NAME = "fast"

# exponents below this contribute < 3e-20 per term; skipping them keeps
# the expensive exp call off the fast path for far-away dictionary points
cdef double _EXP_CUTOFF = -45.0


cdef void _im2col_fill(const double[:, :, :, ::1] x, double[:, ::1] cols,
                       Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
                       Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t i, j, b, ch, u, v, row, col
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                row = (b * ho + i) * wo + j
                col = 0
                for ch in range(c):
                    for u in range(kh):
                        for v in range(kw):
                            cols[row, col] = x[b, ch, i * stride + u, j * stride + v]
                            col += 1


cdef void _col2im_add(double[:, :, :, ::1] gx, const double[:, ::1] gcols,
                      Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
                      Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t n = gx.shape[0], c = gx.shape[1]
    cdef Py_ssize_t i, j, b, ch, u, v, row, col
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                row = (b * ho + i) * wo + j
                col = 0
                for ch in range(c):
                    for u in range(kh):
                        for v in range(kw):
                            gx[b, ch, i * stride + u, j * stride + v] += gcols[row, col]
                            col += 1


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                   const double[::1] b, int stride):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t f = w.shape[0], c = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h - kh) // stride + 1
    cdef Py_ssize_t wo = (wd - kw) // stride + 1
    cols = np.empty((n * ho * wo, c * kh * kw))
    cdef double[:, ::1] cols_mv = cols
    with nogil:
        _im2col_fill(x, cols_mv, kh, kw, stride, ho, wo)
    wmat = np.asarray(w).reshape(f, -1)
    out = cols @ wmat.T + np.asarray(b)
    return np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))


def conv2d_backward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                    int stride, const double[:, :, :, ::1] gout):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t f = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = gout.shape[2], wo = gout.shape[3]
    cols = np.empty((n * ho * wo, c * kh * kw))
    cdef double[:, ::1] cols_mv = cols
    with nogil:
        _im2col_fill(x, cols_mv, kh, kw, stride, ho, wo)
    gout_np = np.asarray(gout)
    gout_cols = np.ascontiguousarray(gout_np.transpose(0, 2, 3, 1).reshape(-1, f))
    wmat = np.asarray(w).reshape(f, -1)
    gw = (cols.T @ gout_cols).T.reshape(f, c, kh, kw)
    gb = gout_np.sum(axis=(0, 2, 3))
    gcols = np.ascontiguousarray(gout_cols @ wmat)
    gx = np.zeros((n, c, h, wd))
    cdef double[:, :, :, ::1] gx_mv = gx
    cdef double[:, ::1] gcols_mv = gcols
    with nogil:
        _col2im_add(gx_mv, gcols_mv, kh, kw, stride, ho, wo)
    return gx, np.ascontiguousarray(gw), gb


def maxpool2d_forward(const double[:, :, :, ::1] x, int window):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t ho = h // window, wo = wd // window
    out = np.empty((n, c, ho, wo))
    arg = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef double[:, :, :, ::1] out_mv = out
    cdef cnp.int64_t[:, :, :, ::1] arg_mv = arg
    cdef Py_ssize_t b, ch, i, j, u, v, r0, c0, best_r, best_c
    cdef double best, val
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        r0 = i * window
                        c0 = j * window
                        best = x[b, ch, r0, c0]
                        best_r = r0
                        best_c = c0
                        for u in range(window):
                            for v in range(window):
                                val = x[b, ch, r0 + u, c0 + v]
                                if val > best:  # strict: ties keep the first in row-major order
                                    best = val
                                    best_r = r0 + u
                                    best_c = c0 + v
                        out_mv[b, ch, i, j] = best
                        arg_mv[b, ch, i, j] = best_r * wd + best_c
    return out, arg


def maxpool2d_backward(const double[:, :, :, ::1] gout, const cnp.int64_t[:, :, :, ::1] argmax,
                       int h, int wd):
    cdef Py_ssize_t n = gout.shape[0], c = gout.shape[1]
    cdef Py_ssize_t ho = gout.shape[2], wo = gout.shape[3]
    gx = np.zeros((n, c, h, wd))
    cdef double[:, :, ::1] gx_mv = gx.reshape(n, c, h * wd)
    cdef Py_ssize_t b, ch, i, j
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        gx_mv[b, ch, argmax[b, ch, i, j]] += gout[b, ch, i, j]
    return gx


def kaf_forward(const double[:, ::1] x2, const double[::1] d, const double[:, ::1] alpha, double gamma):
    cdef Py_ssize_t m = x2.shape[0], c = x2.shape[1], dd = d.shape[0]
    out = np.empty((m, c))
    cdef double[:, ::1] out_mv = out
    cdef Py_ssize_t r, ch, i
    cdef double s, t, e, acc
    with nogil:
        for r in range(m):
            for ch in range(c):
                s = x2[r, ch]
                acc = 0.0
                for i in range(dd):
                    t = s - d[i]
                    e = -gamma * t * t
                    if e > _EXP_CUTOFF:
                        acc += alpha[ch, i] * c_exp(e)
                out_mv[r, ch] = acc
    return out


def kaf_backward(const double[:, ::1] x2, const double[::1] d, const double[:, ::1] alpha,
                 double gamma, const double[:, ::1] g2):
    cdef Py_ssize_t m = x2.shape[0], c = x2.shape[1], dd = d.shape[0]
    galpha = np.zeros((c, dd))
    gx = np.empty((m, c))
    cdef double[:, ::1] galpha_mv = galpha
    cdef double[:, ::1] gx_mv = gx
    cdef Py_ssize_t r, ch, i
    cdef double s, g, t, e, k, acc
    with nogil:
        for r in range(m):
            for ch in range(c):
                s = x2[r, ch]
                g = g2[r, ch]
                acc = 0.0
                for i in range(dd):
                    t = s - d[i]
                    e = -gamma * t * t
                    if e > _EXP_CUTOFF:
                        k = c_exp(e)
                        galpha_mv[ch, i] += g * k
                        acc += alpha[ch, i] * (-2.0 * gamma * t) * k
                gx_mv[r, ch] = g * acc
    return galpha, gx


def kaf2d_forward(const double[:, ::1] x2, const double[::1] d, const double[:, ::1] alpha, double gamma):
    cdef Py_ssize_t m = x2.shape[0], p = x2.shape[1] // 2, dd = d.shape[0]
    out = np.empty((m, p))
    cdef double[:, ::1] out_mv = out
    k1buf = np.empty(dd)
    k2buf = np.empty(dd)
    cdef double[::1] k1 = k1buf
    cdef double[::1] k2 = k2buf
    cdef Py_ssize_t r, q, i, j
    cdef double s1, s2, t, e, acc, ki
    with nogil:
        for r in range(m):
            for q in range(p):
                s1 = x2[r, 2 * q]
                s2 = x2[r, 2 * q + 1]
                for i in range(dd):
                    t = s1 - d[i]
                    e = -gamma * t * t
                    k1[i] = c_exp(e) if e > _EXP_CUTOFF else 0.0
                    t = s2 - d[i]
                    e = -gamma * t * t
                    k2[i] = c_exp(e) if e > _EXP_CUTOFF else 0.0
                acc = 0.0
                for i in range(dd):
                    ki = k1[i]
                    if ki != 0.0:
                        for j in range(dd):
                            acc += alpha[q, i * dd + j] * ki * k2[j]
                out_mv[r, q] = acc
    return out


def kaf2d_backward(const double[:, ::1] x2, const double[::1] d, const double[:, ::1] alpha,
                   double gamma, const double[:, ::1] g2):
    cdef Py_ssize_t m = x2.shape[0], p = x2.shape[1] // 2, dd = d.shape[0]
    galpha = np.zeros((p, dd * dd))
    gx = np.empty((m, x2.shape[1]))
    cdef double[:, ::1] galpha_mv = galpha
    cdef double[:, ::1] gx_mv = gx
    k1buf = np.empty(dd)
    k2buf = np.empty(dd)
    t1buf = np.empty(dd)
    t2buf = np.empty(dd)
    cdef double[::1] k1 = k1buf
    cdef double[::1] k2 = k2buf
    cdef double[::1] t1 = t1buf
    cdef double[::1] t2 = t2buf
    cdef Py_ssize_t r, q, i, j
    cdef double s1, s2, t, e, g, a, gs1, gs2, ki, ti
    with nogil:
        for r in range(m):
            for q in range(p):
                s1 = x2[r, 2 * q]
                s2 = x2[r, 2 * q + 1]
                g = g2[r, q]
                for i in range(dd):
                    t = s1 - d[i]
                    e = -gamma * t * t
                    k1[i] = c_exp(e) if e > _EXP_CUTOFF else 0.0
                    t1[i] = -2.0 * gamma * t * k1[i]
                    t = s2 - d[i]
                    e = -gamma * t * t
                    k2[i] = c_exp(e) if e > _EXP_CUTOFF else 0.0
                    t2[i] = -2.0 * gamma * t * k2[i]
                gs1 = 0.0
                gs2 = 0.0
                for i in range(dd):
                    ki = k1[i]
                    ti = t1[i]
                    for j in range(dd):
                        a = alpha[q, i * dd + j]
                        galpha_mv[q, i * dd + j] += g * ki * k2[j]
                        gs1 += a * ti * k2[j]
                        gs2 += a * ki * t2[j]
                gx_mv[r, 2 * q] = g * gs1
                gx_mv[r, 2 * q + 1] = g * gs2
    return galpha, gx
