# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the hot loops: patch unfolding for convolution, its
adjoint, and the projected sign step shared by every iterative attack.

Each function writes into a caller-allocated output and must stay bitwise
equal to its counterpart in ``_pykernels`` (same per-element operation order).
"""

ctypedef fused real:
    float
    double


cdef inline void _valid_range(Py_ssize_t kj, Py_ssize_t stride, Py_ssize_t pad,
                              Py_ssize_t w, Py_ssize_t wo,
                              Py_ssize_t* j0, Py_ssize_t* j1) noexcept nogil:
    # output columns j with 0 <= j*stride + kj - pad < w
    cdef Py_ssize_t lo = pad - kj, hi = w + pad - kj
    j0[0] = 0 if lo <= 0 else (lo + stride - 1) // stride
    j1[0] = 0 if hi <= 0 else (hi + stride - 1) // stride
    if j1[0] > wo:
        j1[0] = wo
    if j0[0] > j1[0]:
        j0[0] = j1[0]


def im2col(const real[:, :, :, ::1] x, int k, int stride, int pad,
           real[:, ::1] out):
    cdef Py_ssize_t n_img = x.shape[0], chans = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    cdef Py_ssize_t c, ki, kj, n, i, j, ii, j0, j1, off
    cdef const real* src
    cdef real* dst
    with nogil:
        for c in range(chans):
            for ki in range(k):
                for kj in range(k):
                    _valid_range(kj, stride, pad, w, wo, &j0, &j1)
                    off = kj - pad
                    dst = &out[(c * k + ki) * k + kj, 0]
                    for n in range(n_img):
                        for i in range(ho):
                            ii = i * stride + ki - pad
                            if ii < 0 or ii >= h:
                                for j in range(wo):
                                    dst[j] = 0
                            else:
                                src = &x[n, c, ii, 0]
                                for j in range(j0):
                                    dst[j] = 0
                                if stride == 1:
                                    for j in range(j0, j1):
                                        dst[j] = src[j + off]
                                else:
                                    for j in range(j0, j1):
                                        dst[j] = src[j * stride + off]
                                for j in range(j1, wo):
                                    dst[j] = 0
                            dst += wo


def col2im(const real[:, ::1] cols, int k, int stride, int pad,
           real[:, :, :, ::1] out):
    """Scatter-add columns back to image layout. ``out`` must be zeroed."""
    cdef Py_ssize_t n_img = out.shape[0], chans = out.shape[1]
    cdef Py_ssize_t h = out.shape[2], w = out.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    cdef Py_ssize_t c, ki, kj, n, i, j, ii, j0, j1, off
    cdef const real* src
    cdef real* dst
    with nogil:
        for c in range(chans):
            for ki in range(k):
                for kj in range(k):
                    _valid_range(kj, stride, pad, w, wo, &j0, &j1)
                    off = kj - pad
                    src = &cols[(c * k + ki) * k + kj, 0]
                    for n in range(n_img):
                        for i in range(ho):
                            ii = i * stride + ki - pad
                            if 0 <= ii < h:
                                dst = &out[n, c, ii, 0]
                                if stride == 1:
                                    for j in range(j0, j1):
                                        dst[j + off] = dst[j + off] + src[j]
                                else:
                                    for j in range(j0, j1):
                                        dst[j * stride + off] = dst[j * stride + off] + src[j]
                            src += wo


def sign_step(real[::1] x, const real[::1] g, real step,
              const real[::1] lo, const real[::1] hi):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef real s, v
    with nogil:
        for i in range(n):
            if g[i] > 0:
                s = step
            elif g[i] < 0:
                s = -step
            else:
                s = 0
            v = x[i] + s
            if v < lo[i]:
                v = lo[i]
            if v > hi[i]:
                v = hi[i]
            x[i] = v


def masked_sign_step(real[::1] x, const real[::1] g, real step,
                     const real[::1] mask, const real[::1] lo,
                     const real[::1] hi):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef real s, v
    with nogil:
        for i in range(n):
            if g[i] > 0:
                s = step
            elif g[i] < 0:
                s = -step
            else:
                s = 0
            s = s * mask[i]
            v = x[i] + s
            if v < lo[i]:
                v = lo[i]
            if v > hi[i]:
                v = hi[i]
            x[i] = v
