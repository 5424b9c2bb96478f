"""Minimal reverse-mode autodiff over numpy arrays.

Tensors record the op that produced them when gradients are enabled and any
input requires a gradient. :func:`gradients` walks the tape backwards from a
scalar. Only the ops needed by the metrics, the U-Net generator and the
attacks are provided; everything runs in the dtype of the inputs (float32 by
default, float64 for gradient checks).
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from nr_attack import kernels


class AutodiffError(ValueError):
    pass


class ShapeError(AutodiffError):
    pass


_FLOATS = (np.float32, np.float64)
_local = threading.local()
_counter_lock = threading.Lock()
_backward_calls = 0


def is_grad_enabled():
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    """Disable taping in this thread (inference-only forward passes)."""
    prev = is_grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


def backward_count():
    """Number of reverse passes run in this process; used to instrument attacks."""
    return _backward_calls


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOATS:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise AutodiffError("division is only supported by constants")
        return mul(self, 1.0 / other)


def tensor(data, requires_grad=False, dtype=None):
    """Build a leaf tensor, checking the finiteness invariant."""
    t = Tensor(data, requires_grad=requires_grad, dtype=dtype)
    if not np.all(np.isfinite(t.data)):
        raise AutodiffError("tensor data must be finite")
    return t


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward, op):
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------

def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(-g, sb) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), backward, "mul")


def neg(a):
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def square(a):
    a = _as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (g * (2 * ad),), "square")


def sqrt(a):
    """Square root; the gradient at exactly 0 is taken to be 0."""
    a = _as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        pos = out > 0
        return (np.where(pos, g / (2 * np.where(pos, out, 1)), 0).astype(out.dtype),)

    return _make(out, (a,), backward, "sqrt")


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def relu(a):
    a = _as_tensor(a)
    ad = a.data
    return _make(np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),), "relu")


def leaky_relu(a, slope):
    a = _as_tensor(a)
    ad = a.data
    slope = ad.dtype.type(slope)
    pos = ad > 0
    out = np.where(pos, ad, ad * slope)
    return _make(out, (a,), lambda g: (np.where(pos, g, g * slope),), "leaky_relu")


def clamp(a, lo, hi):
    """Clip to [lo, hi]; zero gradient wherever the bound is active."""
    a = _as_tensor(a)
    ad = a.data
    out = np.clip(ad, lo, hi)
    return _make(out, (a,), lambda g: (g * ((ad > lo) & (ad < hi)),), "clamp")


def scaled_tanh(a, scale):
    """``scale * tanh(a)`` with magnitude kept strictly below ``scale``.

    tanh rounds to exactly 1 for large inputs; those entries are pinned to the
    largest representable value under ``scale`` and get zero gradient.
    """
    a = _as_tensor(a)
    dt = a.dtype.type
    scale = dt(scale)
    bound = np.nextafter(scale, dt(0))
    t = np.tanh(a.data)
    raw = scale * t
    out = np.clip(raw, -bound, bound)
    inside = np.abs(raw) <= bound
    return _make(out, (a,), lambda g: (g * (scale * (1 - t * t)) * inside,), "scaled_tanh")


# -- reductions and shape ---------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axes, keepdims), 1.0 / count)


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors, axis=1):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


# -- spatial ops on (N, C, H, W) -----------------------------------------

def _reflect_index(n, p):
    idx = np.arange(-p, n + p)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def pad(a, width, mode="reflect"):
    """Pad the last two axes by ``width`` on every side."""
    a = _as_tensor(a)
    if width == 0:
        return a
    if mode == "zeros":
        pw = [(0, 0)] * (a.ndim - 2) + [(width, width)] * 2
        out = np.pad(a.data, pw)
        return _make(out, (a,), lambda g: (g[..., width:-width, width:-width],), "pad")
    if mode != "reflect":
        raise AutodiffError(f"unknown pad mode {mode!r}")
    h, w = a.shape[-2:]
    ih, iw = _reflect_index(h, width), _reflect_index(w, width)
    out = a.data[..., ih, :][..., iw]
    # one-hot gather matrices; their transposes scatter the gradient back
    mh = np.zeros((len(ih), h), a.dtype)
    mh[np.arange(len(ih)), ih] = 1
    mw = np.zeros((len(iw), w), a.dtype)
    mw[np.arange(len(iw)), iw] = 1

    def backward(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return _make(out, (a,), backward, "pad")


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x`` (N, C, H, W) or (C, H, W) with zero padding.

    ``weight`` is (C_out, C_in, k, k) with odd k. For reflect padding, apply
    :func:`pad` first and call with ``padding=0``.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if bias is not None:
        bias = _as_tensor(bias)
    if x.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), weight, bias, stride, padding)
        return reshape(out, out.shape[1:])
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got input {x.shape} and kernel {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise ShapeError(f"conv2d channel mismatch: input has C_in={c}, kernel expects C_in={cin}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d needs a square odd kernel, got {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match C_out={cout}")
    k = kh
    ho, wo = kernels.conv_out_size(h, k, stride, padding), kernels.conv_out_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty: H={h}, W={w}, k={k}, padding={padding}")
    dtype = x.dtype
    wd = weight.data.astype(dtype, copy=False)
    taping = is_grad_enabled() and any(t.requires_grad for t in (x, weight, bias) if t is not None)
    if not taping and stride == 1 and 2 * padding == k - 1 and h * w >= 256 and c >= 8:
        bd = None if bias is None else bias.data.astype(dtype, copy=False)
        return Tensor(_conv_same_shifted(x.data, wd, bd))
    cols = kernels.im2col(x.data, k, stride, padding)
    wmat = wd.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data.astype(dtype, copy=False)[:, None]
    out = out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3).copy()
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gm = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gx = gw = gb = None
        if x.requires_grad:
            gx = kernels.col2im(wmat.T @ gm, x.shape, k, stride, padding)
        if weight.requires_grad:
            gw = (gm @ cols.T).reshape(weight.shape).astype(weight.dtype, copy=False)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=1).astype(bias.dtype, copy=False)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make(out, parents, backward, "conv2d")


def _conv_same_shifted(x, w, b):
    """Inference-only 'same' convolution without unfolding.

    The zero-padded image is flattened so that every kernel tap reads a
    contiguous window of it; the output is accumulated from k*k GEMMs over a
    grid that is ``k - 1`` columns too wide, which is cropped at the end.
    """
    n, c, h, wid = x.shape
    cout, _, k, _ = w.shape
    p = k // 2
    wp = wid + 2 * p
    xp = np.zeros((n, c, h + 2 * p + 1, wp), x.dtype)
    xp[:, :, p : p + h, p : p + wid] = x
    flat = xp.reshape(n, c, -1)
    span = h * wp
    taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
    out = np.empty((n, cout, span), x.dtype)
    tmp = np.empty((cout, span), x.dtype)
    for i in range(n):
        for ki in range(k):
            for kj in range(k):
                off = ki * wp + kj
                if ki == 0 and kj == 0:
                    np.matmul(taps[ki, kj], flat[i, :, off : off + span], out=out[i])
                else:
                    np.matmul(taps[ki, kj], flat[i, :, off : off + span], out=tmp)
                    out[i] += tmp
    out = out.reshape(n, cout, h, wp)[..., :wid]
    if b is not None:
        out = out + b[:, None, None]
    return np.ascontiguousarray(out)


def avg_pool2(x):
    x = _as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    quarter = x.dtype.type(0.25)

    def backward(g):
        return (np.repeat(np.repeat(g * quarter, 2, axis=2), 2, axis=3),)

    return _make(out.astype(x.dtype, copy=False), (x,), backward, "avg_pool2")


def upsample2(x):
    """Nearest-neighbour 2x upsampling."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), backward, "upsample2")


# -- gradients ------------------------------------------------------------

def gradients(out, wrt):
    """Reverse-mode gradients of scalar ``out`` w.r.t. each tensor in ``wrt``."""
    global _backward_calls
    if not isinstance(out, Tensor):
        raise AutodiffError(f"objective must return a Tensor built from autodiff ops, got {type(out).__name__}")
    if out.data.size != 1:
        raise AutodiffError(f"objective must be scalar, got shape {out.shape}")
    with _counter_lock:
        _backward_calls += 1
    grads = {}
    if out.requires_grad:
        order, seen, stack = [], set(), [(out, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads[id(out)] = np.ones_like(out.data)
        for node in reversed(order):
            if node._backward is None:
                continue
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
    result = []
    for t in wrt:
        g = grads.get(id(t))
        result.append(np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape))
    return result


def grad_scalar(objective, wrt):
    """Gradient of ``objective(*leaves)`` at ``wrt``.

    ``wrt`` is an array or a list of arrays; a single array gives a single
    gradient back, a list gives a list.
    """
    single = not isinstance(wrt, (list, tuple))
    arrays = [wrt] if single else list(wrt)
    leaves = [Tensor(np.array(a, copy=True) if not isinstance(a, Tensor) else a.data, requires_grad=True)
              for a in arrays]
    out = objective(*leaves)
    grads = gradients(out, leaves)
    return grads[0] if single else grads


def finite_diff_grad(objective, point, h=1e-3):
    """Central-difference gradient of a scalar function, one coordinate at a time.

    Run it on float64 points; in float32 the truncation of ``x +/- h`` dominates.
    """
    if h <= 0:
        raise ValueError("finite-difference step h must be positive")
    x = np.array(point, copy=True)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)

    def f(v):
        r = objective(v)
        return float(r.data) if isinstance(r, Tensor) else float(r)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


# -- Adam ----------------------------------------------------------------

@dataclass
class AdamState:
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stability: float = 1e-8


def adam_init(params, beta1=0.9, beta2=0.999, eps_stability=1e-8):
    params = _as_param_dict(params)
    return AdamState({k: np.zeros_like(v) for k, v in params.items()},
                     {k: np.zeros_like(v) for k, v in params.items()},
                     0, beta1, beta2, eps_stability)


def _as_param_dict(p):
    return p if isinstance(p, dict) else {None: np.asarray(p)}


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update; returns new (params, state), inputs untouched.

    ``params`` and ``grads`` are matching dicts of arrays or single arrays. A
    parameter whose gradient is identically zero is left as is (its moments
    are not decayed), so a zero gradient never moves anything.
    """
    single = not isinstance(params, dict)
    params, grads = _as_param_dict(params), _as_param_dict(grads)
    if not state.first_moment:
        state = adam_init(params, state.beta1, state.beta2, state.eps_stability)
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m, v = state.first_moment[name], state.second_moment[name]
        if not np.all(np.isfinite(g)):
            raise AutodiffError(f"non-finite gradient for parameter {name!r}")
        if not g.any():
            new_p[name], new_m[name], new_v[name] = p, m, v
            continue
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        new_p[name] = (p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps_stability)).astype(p.dtype, copy=False)
        new_m[name], new_v[name] = m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False)
    new_state = AdamState(new_m, new_v, t, b1, b2, state.eps_stability)
    if single:
        return new_p[None], new_state
    return new_p, new_state
