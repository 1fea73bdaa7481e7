"""Pure-numpy implementations of the hot kernels.

Same contracts as the compiled module `_fast`; this is the fallback picked
at import time when the extension is missing (or KAF_ONESHOT_BACKEND=ref).
Convolution is im2col plus one BLAS matmul; the KAF mixtures are evaluated
in row chunks to bound the (rows, channels, D) temporaries.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "ref"

_CHUNK_ELEMS = 2_000_000  # cap on elements per (rows, C, D) temporary


def _im2col(x, kh, kw, stride):
    n, c = x.shape[:2]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def conv2d_forward(x, w, b, stride):
    n = x.shape[0]
    f, _, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride)
    out = cols @ w.reshape(f, -1).T + b
    return np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))


def conv2d_backward(x, w, stride, gout):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho, wo = gout.shape[2], gout.shape[3]
    gout_cols = np.ascontiguousarray(gout.transpose(0, 2, 3, 1).reshape(-1, f))
    cols, _, _ = _im2col(x, kh, kw, stride)
    gw = (cols.T @ gout_cols).T.reshape(f, c, kh, kw)
    gb = gout.sum(axis=(0, 2, 3))
    gcols = gout_cols @ w.reshape(f, -1)
    gx = np.zeros_like(x)
    g6 = gcols.reshape(n, ho, wo, c, kh, kw).transpose(4, 5, 0, 3, 1, 2)
    for u in range(kh):
        for v in range(kw):
            gx[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += g6[u, v]
    return gx, np.ascontiguousarray(gw), gb


def maxpool2d_forward(x, window):
    n, c, h, wd = x.shape
    ho, wo = h // window, wd // window
    blocks = x.reshape(n, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, window * window)
    # argmax takes the first maximum, which is row-major order inside the window
    k = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, k[..., None], axis=-1)[..., 0]
    u, v = k // window, k % window
    rows = np.arange(ho)[None, None, :, None] * window + u
    cols = np.arange(wo)[None, None, None, :] * window + v
    arg = (rows * wd + cols).astype(np.int64)
    return np.ascontiguousarray(out), np.ascontiguousarray(arg)


def maxpool2d_backward(gout, argmax, h, wd):
    n, c = gout.shape[:2]
    gx = np.zeros((n, c, h * wd))
    np.put_along_axis(gx, argmax.reshape(n, c, -1), gout.reshape(n, c, -1), axis=2)
    return gx.reshape(n, c, h, wd)


def _row_chunks(m, c, d):
    step = max(1, _CHUNK_ELEMS // max(1, c * d))
    for lo in range(0, m, step):
        yield slice(lo, min(lo + step, m))


def kaf_forward(x2, d, alpha, gamma):
    m, c = x2.shape
    out = np.empty((m, c))
    for sl in _row_chunks(m, c, d.shape[0]):
        k = np.exp(-gamma * (x2[sl, :, None] - d) ** 2)
        out[sl] = np.einsum("mcd,cd->mc", k, alpha)
    return out


def kaf_backward(x2, d, alpha, gamma, g2):
    m, c = x2.shape
    galpha = np.zeros_like(alpha)
    gx = np.empty_like(x2)
    for sl in _row_chunks(m, c, d.shape[0]):
        diff = x2[sl, :, None] - d
        k = np.exp(-gamma * diff**2)
        galpha += np.einsum("mc,mcd->cd", g2[sl], k)
        gx[sl] = g2[sl] * np.einsum("cd,mcd->mc", alpha, -2.0 * gamma * diff * k)
    return galpha, gx


def kaf2d_forward(x2, d, alpha, gamma):
    # The 2-D Gaussian kernel factorizes over the grid axes:
    # exp(-g*((s1-di)^2+(s2-dj)^2)) = exp(-g*(s1-di)^2) * exp(-g*(s2-dj)^2)
    m = x2.shape[0]
    p = x2.shape[1] // 2
    dd = d.shape[0]
    a3 = alpha.reshape(p, dd, dd)
    s1, s2 = x2[:, 0::2], x2[:, 1::2]
    out = np.empty((m, p))
    for sl in _row_chunks(m, p, dd):
        k1 = np.exp(-gamma * (s1[sl, :, None] - d) ** 2)
        k2 = np.exp(-gamma * (s2[sl, :, None] - d) ** 2)
        out[sl] = np.einsum("mpi,pij,mpj->mp", k1, a3, k2, optimize=True)
    return out


def kaf2d_backward(x2, d, alpha, gamma, g2):
    m = x2.shape[0]
    p = x2.shape[1] // 2
    dd = d.shape[0]
    a3 = alpha.reshape(p, dd, dd)
    s1, s2 = x2[:, 0::2], x2[:, 1::2]
    galpha3 = np.zeros((p, dd, dd))
    gx = np.empty_like(x2)
    for sl in _row_chunks(m, p, dd):
        diff1 = s1[sl, :, None] - d
        diff2 = s2[sl, :, None] - d
        k1 = np.exp(-gamma * diff1**2)
        k2 = np.exp(-gamma * diff2**2)
        gk1 = g2[sl][:, :, None] * k1  # (m, p, i)
        galpha3 += np.matmul(gk1.transpose(1, 2, 0), k2.transpose(1, 0, 2))
        wk2 = np.einsum("pij,mpj->mpi", a3, k2, optimize=True)
        wk1 = np.einsum("pij,mpi->mpj", a3, k1, optimize=True)
        gx[sl, 0::2] = g2[sl] * np.einsum("mpi,mpi->mp", wk2, -2.0 * gamma * diff1 * k1)
        gx[sl, 1::2] = g2[sl] * np.einsum("mpj,mpj->mp", wk1, -2.0 * gamma * diff2 * k2)
    return galpha3.reshape(p, dd * dd), gx
