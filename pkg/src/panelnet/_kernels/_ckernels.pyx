# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot loops: convolution lowering and circular panel folding."""

import numpy as np
from libc.string cimport memcpy

ctypedef fused real:
    float
    double


def im2col(const real[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    """Lower ``x`` (B, C, H, W) to patches of shape (B, C*kh*kw, Ho*Wo)."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((B, C * kh * kw, Ho * Wo), dtype=dtype)
    if out_arr.size == 0 or x.size == 0:
        return out_arr
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, u, v, k, yy, j0, j1
    cdef real* dst
    cdef const real* src
    with nogil:
        for b in range(B):
            for c in range(C):
                for u in range(kh):
                    for v in range(kw):
                        k = (c * kh + u) * kw + v
                        # valid output columns: 0 <= j*stride - pad + v < W
                        j0 = (pad - v + stride - 1) // stride if pad > v else 0
                        j1 = (W - 1 + pad - v) // stride + 1
                        if j1 > Wo:
                            j1 = Wo
                        if j1 <= j0:
                            continue
                        for i in range(Ho):
                            yy = i * stride - pad + u
                            if yy < 0 or yy >= H:
                                continue
                            dst = &out[b, k, i * Wo]
                            src = &x[b, c, yy, 0] + (v - pad)
                            if stride == 1:
                                memcpy(dst + j0, src + j0, (j1 - j0) * sizeof(real))
                            else:
                                for j in range(j0, j1):
                                    dst[j] = src[j * stride]
    return out_arr


def col2im(const real[:, :, ::1] cols, int B, int C, int H, int W,
           int kh, int kw, int stride, int pad):
    """Adjoint of :func:`im2col`: scatter-add (B, C*kh*kw, Ho*Wo) back to (B, C, H, W)."""
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((B, C, H, W), dtype=dtype)
    if out_arr.size == 0 or cols.size == 0:
        return out_arr
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, u, v, k, yy, j0, j1
    cdef real* dst
    cdef const real* src
    with nogil:
        for b in range(B):
            for c in range(C):
                for u in range(kh):
                    for v in range(kw):
                        k = (c * kh + u) * kw + v
                        j0 = (pad - v + stride - 1) // stride if pad > v else 0
                        j1 = (W - 1 + pad - v) // stride + 1
                        if j1 > Wo:
                            j1 = Wo
                        for i in range(Ho):
                            yy = i * stride - pad + u
                            if yy < 0 or yy >= H:
                                continue
                            src = &cols[b, k, i * Wo]
                            dst = &out[b, c, yy, 0] + (v - pad)
                            for j in range(j0, j1):
                                dst[j * stride] += src[j]
    return out_arr


def fold_columns(const real[:, :, :, ::1] panels, int width, int stride):
    """Sum panels (N, C, H, I) onto a circular (C, H, width) canvas.

    Accumulates in float64, panel 0 first, then casts to the input dtype.
    """
    cdef Py_ssize_t N = panels.shape[0], C = panels.shape[1]
    cdef Py_ssize_t H = panels.shape[2], I = panels.shape[3]
    acc_arr = np.zeros((C, H, width), dtype=np.float64)
    cdef double[:, :, ::1] acc = acc_arr
    cdef Py_ssize_t n, c, r, j, col
    with nogil:
        for n in range(N):
            for c in range(C):
                for r in range(H):
                    for j in range(I):
                        col = (n * stride + j) % width
                        acc[c, r, col] += panels[n, c, r, j]
    dtype = np.float32 if real is float else np.float64
    return acc_arr.astype(dtype, copy=False)
