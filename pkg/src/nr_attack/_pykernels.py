"""Pure-numpy fallback for ``_ckernels``.

Signatures and per-element arithmetic order match the compiled module so the
two backends agree bitwise.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k, stride, pad, out):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (n, c, ho, wo, k, k) -> (c, k, k, n, ho, wo)
    out.reshape(c, k, k, n, ho, wo)[...] = win.transpose(1, 4, 5, 0, 2, 3)


def col2im(cols, k, stride, pad, out):
    n, c, h, w = out.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=out.dtype)
    blocks = cols.reshape(c, k, k, n, ho, wo).transpose(3, 0, 1, 2, 4, 5)
    for ki in range(k):
        for kj in range(k):
            padded[:, :, ki : ki + stride * (ho - 1) + 1 : stride,
                   kj : kj + stride * (wo - 1) + 1 : stride] += blocks[:, :, ki, kj]
    out += padded[:, :, pad : pad + h, pad : pad + w]


def sign_step(x, g, step, lo, hi):
    np.clip(x + np.sign(g) * step, lo, hi, out=x)


def masked_sign_step(x, g, step, mask, lo, hi):
    np.clip(x + (np.sign(g) * step) * mask, lo, hi, out=x)
