"""Pure-numpy versions of the compiled kernels. Same signatures, same results."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, pad):
    B, C, H, W = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * kh * kw, Ho * Wo)


def col2im(cols, B, C, H, W, kh, kw, stride, pad):
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    patches = cols.reshape(B, C, kh, kw, Ho, Wo)
    out = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for u in range(kh):
        for v in range(kw):
            out[:, :, u:u + stride * Ho:stride, v:v + stride * Wo:stride] += patches[:, :, u, v]
    if pad:
        out = out[:, :, pad:pad + H, pad:pad + W]
    return np.ascontiguousarray(out)


def fold_columns(panels, width, stride):
    N, C, H, I = panels.shape
    acc = np.zeros((C, H, width), dtype=np.float64)
    for n in range(N):
        cols = (n * stride + np.arange(I)) % width
        acc[:, :, cols] += panels[n]
    return acc.astype(panels.dtype, copy=False)
