"""Hot-loop kernels with a compiled backend and a numpy fallback.

The Cython extension ``_ckernels`` is used when it was built; otherwise (or
when ``NR_ATTACK_PURE_PYTHON=1`` is set before import) the numpy versions in
``_pykernels`` are used. Both produce bitwise-identical results.
"""

import os

import numpy as np

from nr_attack import _pykernels

_impl = _pykernels
BACKEND = "python"
if os.environ.get("NR_ATTACK_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from nr_attack import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        pass


def _resolve(impl):
    """``impl`` may be None (selected backend), a name ("python", "cython") or a module."""
    if impl is None:
        return _impl
    if impl == "python":
        return _pykernels
    if impl == "cython":
        from nr_attack import _ckernels

        return _ckernels
    return impl


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, k, stride=1, pad=0, impl=None):
    """Unfold ``x`` (N, C, H, W) into columns of shape (C*k*k, N*Ho*Wo)."""
    impl = _resolve(impl)
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    out = np.empty((c * k * k, n * ho * wo), dtype=x.dtype)
    impl.im2col(x, k, stride, pad, out)
    return out


def col2im(cols, shape, k, stride=1, pad=0, impl=None):
    """Adjoint of :func:`im2col`; overlapping patches are summed."""
    impl = _resolve(impl)
    out = np.zeros(shape, dtype=cols.dtype)
    impl.col2im(np.ascontiguousarray(cols), k, stride, pad, out)
    return out


def projected_sign_step(x, g, step, lo, hi, mask=None, impl=None):
    """In place: ``x <- clip(x + step * sign(g) [* mask], lo, hi)``.

    All arrays must share shape and dtype and be C-contiguous.
    """
    impl = _resolve(impl)
    step = x.dtype.type(step)
    xf, gf = x.reshape(-1), np.ascontiguousarray(g, dtype=x.dtype).reshape(-1)
    lof = np.ascontiguousarray(lo, dtype=x.dtype).reshape(-1)
    hif = np.ascontiguousarray(hi, dtype=x.dtype).reshape(-1)
    if mask is None:
        impl.sign_step(xf, gf, step, lof, hif)
    else:
        mf = np.ascontiguousarray(mask, dtype=x.dtype).reshape(-1)
        impl.masked_sign_step(xf, gf, step, mf, lof, hif)
    return x
