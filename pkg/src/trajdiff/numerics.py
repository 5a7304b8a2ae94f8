"""Dense float tensors with reverse-mode differentiation.

Everything downstream (encoders, the distribution converter, the denoiser,
the losses) is built from the primitive operations in this module.  The
design is deliberately small:

* values are immutable numpy arrays (float32 by default),
* a forward pass optionally records onto an explicit ``ComputationRecord``,
* ``backward`` replays that record once, in reverse, and returns a
  gradient per named parameter,
* broadcasting is restricted to leading (batch) dimensions; any other
  shape alignment must be an explicit ``reshape``/``concat``/``transpose``.

Every primitive validates that its output is finite and raises
``NumericsError`` otherwise, so NaN/Inf never propagate silently.
"""

from __future__ import annotations

import contextlib

import numpy as np


class NumericsError(RuntimeError):
    """Raised for shape mismatches, non-finite values and misuse of records."""


# Default dtype is float32 (desk-scale models, fast tests).  The finite
# difference harness switches to float64, where the central-difference
# oracle is actually meaningful.
_DTYPE = np.float32


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


class Tensor:
    """Immutable dense array plus a gradient-tracking flag.

    ``data`` is a C-contiguous (row-major) numpy array.  Tensors are never
    mutated by primitives; each operation allocates its output.
    """

    __slots__ = ("data", "requires_grad", "_rec")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DTYPE)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise NumericsError("tensor created from non-finite data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._rec = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise NumericsError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"

    # Small amount of operator sugar; everything routes through the
    # primitives below so recording and validation stay in one place.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __getitem__(self, key):
        return slice_(self, key)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


# ---------------------------------------------------------------------------
# Recording


class ComputationRecord:
    """Ordered log of primitive applications from one forward pass.

    Used as a context manager; primitives whose inputs require gradients
    append themselves while the record is active.  A record supports exactly
    one ``backward`` call.
    """

    def __init__(self):
        self.entries = []
        self.consumed = False
        self._outer = None

    def __enter__(self):
        global _ACTIVE
        self._outer = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE
        _ACTIVE = self._outer
        self._outer = None
        return False


_ACTIVE: ComputationRecord | None = None


class _Entry:
    __slots__ = ("out", "inputs", "grad_fn")

    def __init__(self, out, inputs, grad_fn):
        self.out = out
        self.inputs = inputs
        self.grad_fn = grad_fn


def _make(out_data: np.ndarray, inputs: tuple, grad_fn) -> Tensor:
    """Wrap a primitive result, validating finiteness and recording it."""
    if not np.all(np.isfinite(out_data)):
        raise NumericsError("primitive produced a non-finite value")
    out = Tensor.__new__(Tensor)
    if not out_data.flags["C_CONTIGUOUS"]:
        out_data = np.ascontiguousarray(out_data)
    out.data = out_data
    out.requires_grad = any(t.requires_grad for t in inputs)
    out._rec = None
    if out.requires_grad and _ACTIVE is not None:
        _ACTIVE.entries.append(_Entry(out, inputs, grad_fn))
        out._rec = _ACTIVE
    return out


def backward(loss: Tensor, params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Single reverse sweep from a scalar loss.

    Returns one gradient tensor per entry of ``params``; parameters the loss
    does not depend on map to zeros.  The record backing ``loss`` may be
    swept only once.
    """
    if loss.size != 1:
        raise NumericsError(f"backward expects a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    rec = loss._rec
    if rec is not None:
        if rec.consumed:
            raise NumericsError("backward called twice on the same record")
        rec.consumed = True
        grads[id(loss)] = np.ones_like(loss.data)
        for entry in reversed(rec.entries):
            g_out = grads.pop(id(entry.out), None)
            if g_out is None:
                continue
            for t, g in zip(entry.inputs, entry.grad_fn(g_out)):
                if g is None or not t.requires_grad:
                    continue
                if id(t) in grads:
                    grads[id(t)] = grads[id(t)] + g
                else:
                    grads[id(t)] = g
    out = {}
    for name, p in params.items():
        g = grads.get(id(p))
        out[name] = Tensor(np.zeros_like(p.data) if g is None else g)
    return out


# ---------------------------------------------------------------------------
# Broadcasting rules: equal shapes, or the smaller operand's shape must be
# a trailing suffix of the larger's (leading/batch broadcast only).


def _broadcast_shapes(sa, sb):
    if sa == sb:
        return sa
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise NumericsError(f"shapes {sa} and {sb} do not batch-broadcast")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(range(g.ndim - len(shape)))
    return g.sum(axis=axes)


# ---------------------------------------------------------------------------
# Primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shapes(a.shape, b.shape)

    def grad_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(a.data + b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shapes(a.shape, b.shape)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)

    return _make(ad * bd, (a, b), grad_fn)


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``b`` 2-D; ``a`` may carry one leading batch axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 2 or a.ndim not in (2, 3) or a.shape[-1] != b.shape[0]:
        raise NumericsError(f"matmul shapes {a.shape} x {b.shape} unsupported")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g @ bd.T
        if ad.ndim == 2:
            gb = ad.T @ g
        else:
            gb = np.tensordot(ad, g, axes=([0, 1], [0, 1]))
        return ga, gb

    return _make(ad @ bd, (a, b), grad_fn)


_PAD_MODES = ("same", "left", "valid")


def conv1d(x, w, padding: str = "same") -> Tensor:
    """1-D convolution over the last axis, stride 1.

    ``x`` is [batch, in_channels, length], ``w`` is [out_channels,
    in_channels, kernel].  ``left`` pads only on the left (causal), ``same``
    pads symmetrically, ``valid`` does not pad.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise NumericsError(f"conv1d shapes {x.shape} x {w.shape} unsupported")
    if padding not in _PAD_MODES:
        raise NumericsError(f"unknown padding mode {padding!r}")
    k = w.shape[2]
    if padding == "same":
        pl, pr = (k - 1) // 2, k - 1 - (k - 1) // 2
    elif padding == "left":
        pl, pr = k - 1, 0
    else:
        pl, pr = 0, 0
    length = x.shape[2]
    if length + pl + pr < k:
        raise NumericsError("conv1d input shorter than kernel")
    n, c_in = x.shape[0], x.shape[1]
    c_out = w.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (pl, pr)))
    l_out = xp.shape[2] - k + 1
    # im2col so both passes run as BLAS matmuls
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)
    cols = np.ascontiguousarray(cols.transpose(0, 2, 1, 3)).reshape(n * l_out, c_in * k)
    w2 = w.data.reshape(c_out, c_in * k)
    out = (cols @ w2.T).reshape(n, l_out, c_out).transpose(0, 2, 1)

    def grad_fn(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(n * l_out, c_out)
        gw = (gt.T @ cols).reshape(c_out, c_in, k)
        gcols = (gt @ w2).reshape(n, l_out, c_in, k)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j:j + l_out] += gcols[:, :, :, j].transpose(0, 2, 1)
        return gxp[:, :, pl:pl + length], gw

    return _make(out, (x, w), grad_fn)


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(x.data, axes), (x,), grad_fn)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    orig = x.shape

    def grad_fn(g):
        return (g.reshape(orig),)

    return _make(x.data.reshape(shape), (x,), grad_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise NumericsError("concat of zero tensors")
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, grad_fn)


def slice_(x, key) -> Tensor:
    """Basic indexing (slices and integers); gradients scatter back."""
    x = _as_tensor(x)
    shape = x.shape

    def grad_fn(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[key] = g
        return (gx,)

    return _make(np.ascontiguousarray(x.data[key]), (x,), grad_fn)


def _axis_count(shape, axis):
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    if isinstance(axis, int):
        axis = (axis,)
    return int(np.prod([shape[a] for a in axis]))


def _unreduce(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    ax = (axis,) if isinstance(axis, int) else tuple(axis)
    if not keepdims:
        g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape

    def grad_fn(g):
        return (_unreduce(g, shape, axis, keepdims).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), grad_fn)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    n = _axis_count(shape, axis)

    def grad_fn(g):
        return (_unreduce(g, shape, axis, keepdims) / n,)

    return _make(x.data.mean(axis=axis, keepdims=keepdims), (x,), grad_fn)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out_data = np.exp(x.data)

    def grad_fn(g):
        return (g * out_data,)

    return _make(out_data, (x,), grad_fn)


def log(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(xd)

    def grad_fn(g):
        return (g / xd,)

    return _make(out_data, (x,), grad_fn)


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(invalid="ignore"):
        out_data = np.sqrt(x.data)

    def grad_fn(g):
        return (g * (0.5 / out_data),)

    return _make(out_data, (x,), grad_fn)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out_data = np.tanh(x.data)

    def grad_fn(g):
        return (g * (1.0 - out_data * out_data),)

    return _make(out_data, (x,), grad_fn)


def softplus(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data

    def grad_fn(g):
        # sigmoid(x), computed stably as exp(-softplus(-x))
        return (g * np.exp(-np.logaddexp(0.0, -xd)),)

    return _make(np.logaddexp(0.0, xd), (x,), grad_fn)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return _make(out_data, (x,), grad_fn)


def scaled_dot_attention(q, k, v) -> Tensor:
    """Single-head attention: softmax(q.kT / sqrt(d)) v, batched over axis 0."""
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise NumericsError("attention expects [batch, tokens, dim] operands")
    if q.shape[0] != k.shape[0] or k.shape[:2] != v.shape[:2] or q.shape[2] != k.shape[2]:
        raise NumericsError(f"attention shapes {q.shape}/{k.shape}/{v.shape} mismatch")
    scale = 1.0 / np.sqrt(q.shape[2])
    scores = np.einsum("ntd,nsd->nts", q.data, k.data) * scale
    scores -= scores.max(axis=2, keepdims=True)
    e = np.exp(scores)
    w = e / e.sum(axis=2, keepdims=True)
    out = np.einsum("nts,nsd->ntd", w, v.data)
    qd, kd, vd = q.data, k.data, v.data

    def grad_fn(g):
        gw = np.einsum("ntd,nsd->nts", g, vd)
        gv = np.einsum("nts,ntd->nsd", w, g)
        gs = w * (gw - (gw * w).sum(axis=2, keepdims=True))
        gq = np.einsum("nts,nsd->ntd", gs, kd) * scale
        gk = np.einsum("nts,ntd->nsd", gs, qd) * scale
        return gq, gk, gv

    return _make(out, (q, k, v), grad_fn)


_PRIMITIVES = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "conv1d": conv1d,
    "transpose": transpose,
    "reshape": reshape,
    "concat": concat,
    "slice": slice_,
    "mean": mean,
    "sum": sum_,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "softplus": softplus,
    "sqrt": sqrt,
    "softmax": softmax,
    "scaled_dot_attention": scaled_dot_attention,
}


def apply_primitive(kind: str, inputs, attrs: dict | None = None) -> Tensor:
    """Name-based dispatch to the primitive set (the stable op surface)."""
    fn = _PRIMITIVES.get(kind)
    if fn is None:
        raise NumericsError(f"unknown primitive kind {kind!r}")
    attrs = attrs or {}
    if kind == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


def reciprocal_positive(x: Tensor) -> Tensor:
    """1/x for strictly positive x, composed as exp(-log(x))."""
    return exp(mul(log(x), -1.0))


# ---------------------------------------------------------------------------
# Gradient verification


def finite_difference_check(f, params: dict[str, Tensor], step: float = 1e-3,
                            tolerance: float = 1e-2) -> dict:
    """Compare analytic gradients of ``f(params)`` against central differences.

    ``f`` must be deterministic (draw any randomness outside and close over
    it).  Relative errors use a denominator floored at 1e-6; the check
    passes iff the worst element stays within ``tolerance``.  Run under
    ``precision(np.float64)`` for trustworthy numerics.
    """

    def eval_scalar():
        out = f(params)
        if out.size != 1:
            raise NumericsError("finite_difference_check needs a scalar function")
        return float(out.data.reshape(()))

    if eval_scalar() != eval_scalar():
        raise NumericsError("f is not deterministic under a fixed seed")

    with ComputationRecord():
        loss = f(params)
    grads = backward(loss, params)

    max_rel = 0.0
    worst = None
    for name, p in params.items():
        analytic = grads[name].data
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = eval_scalar()
            flat[i] = orig - step
            fm = eval_scalar()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            a = float(analytic.reshape(-1)[i])
            denom = max(abs(a), abs(numeric), 1e-6)
            rel = abs(a - numeric) / denom
            if rel > max_rel:
                max_rel = rel
                worst = (name, i)
    return {"max_relative_error": max_rel, "pass": max_rel <= tolerance, "worst": worst}
