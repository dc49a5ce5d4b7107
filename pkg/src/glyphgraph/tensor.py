"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

Everything runs in 64-bit floats: gradient checking against central finite
differences is the primary verification instrument here, so precision beats
speed. One tape per training step; it is replayed in reverse exactly once by
``backward`` and discarded afterwards. The active tape is thread-local, so a
tape and the tensors recorded on it belong to one thread, while read-only
inference without a tape is safe from any number of threads.
"""

from __future__ import annotations

import itertools
import math
import threading

import numpy as np

from .errors import ContractError, DivergenceError, ShapeError

_TLS = threading.local()
_TAPE_IDS = itertools.count(1)

# Opt-in per-operation finite check. Kept off by default for speed; loss and
# optimizer boundaries always check regardless of this flag.
_FINITE_CHECKS = False


def set_finite_checks(enabled):
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def finite_checks_enabled():
    return _FINITE_CHECKS


class Tensor:
    """A dense float64 value, optionally carrying a gradient buffer.

    ``node_id`` is ``(tape_id, index)`` when the tensor lives on a tape,
    ``None`` otherwise. Plain data tensors (inputs, constants) stay off the
    tape unless explicitly watched.
    """

    __slots__ = ("data", "grad", "node_id")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def grad_array(self):
        """Gradient buffer, materializing zeros when nothing reached this leaf."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tracked={self.node_id is not None})"

    # Operator sugar; canonical entry points are the module-level functions.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    def __radd__(self, other):
        return shift(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Parameter:
    """A named, optionally trainable tensor. Names are unique within a model."""

    __slots__ = ("tensor", "name", "trainable")

    def __init__(self, value, name="", trainable=True):
        self.tensor = value if isinstance(value, Tensor) else Tensor(value)
        self.name = name
        self.trainable = trainable

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad_array()

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape}, trainable={self.trainable})"


class Tape:
    """Execution-ordered record of operations; reverse replay drives the chain rule.

    Execution order is a topological order of the value graph, so iterating
    the entries backwards visits each node exactly once. Gradients accumulate
    additively across fan-out.
    """

    def __init__(self):
        self.tape_id = next(_TAPE_IDS)
        self._entries = []

    def __len__(self):
        return len(self._entries)

    def watch(self, tensor):
        """Attach a leaf tensor so downstream ops record gradients for it."""
        if tensor.node_id is None or tensor.node_id[0] != self.tape_id:
            tensor.node_id = (self.tape_id, -1)
        return tensor

    def watch_trainable(self, parameters):
        for p in parameters:
            if p.trainable:
                self.watch(p.tensor)

    def _record(self, inputs, output, grad_fn):
        output.node_id = (self.tape_id, len(self._entries))
        self._entries.append((inputs, output, grad_fn))

    def backward(self, loss):
        """Populate ``grad`` for every watched tensor reachable from ``loss``.

        Accumulates into pre-existing grad buffers, so summing two losses and
        calling backward once equals two separate backward passes added up.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if loss.node_id is None or loss.node_id[0] != self.tape_id:
            raise ContractError("loss is not recorded on this tape")
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        else:
            loss.grad = loss.grad + np.ones_like(loss.data)
        for inputs, output, grad_fn in reversed(self._entries):
            g = output.grad
            if g is None:
                continue
            grads = grad_fn(g)
            for inp, gi in zip(inputs, grads):
                if gi is None:
                    continue
                if inp.node_id is None or inp.node_id[0] != self.tape_id:
                    continue
                if inp.grad is None:
                    # May alias g or a view of it; safe because grad buffers
                    # are never mutated in place, only rebound on accumulation.
                    inp.grad = gi
                else:
                    inp.grad = inp.grad + gi


class tape:
    """Context manager installing a fresh thread-local tape."""

    def __enter__(self):
        t = Tape()
        stack = getattr(_TLS, "stack", None)
        if stack is None:
            stack = _TLS.stack = []
        stack.append(t)
        return t

    def __exit__(self, exc_type, exc, tb):
        _TLS.stack.pop()
        return False


def active_tape():
    stack = getattr(_TLS, "stack", None)
    return stack[-1] if stack else None


def _recording_tape(inputs):
    t = active_tape()
    if t is None:
        return None
    for inp in inputs:
        nid = inp.node_id
        if nid is not None and nid[0] == t.tape_id:
            return t
    return None


def _make(data, inputs, grad_fn, op=""):
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise DivergenceError(f"non-finite values produced by {op or 'op'}")
    out = Tensor(data)
    t = _recording_tape(inputs)
    if t is not None:
        t._record(tuple(inputs), out, grad_fn)
    return out


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    if a.data.shape == b.data.shape:
        return
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


def const(data):
    return Tensor(data)


def zeros(shape):
    return Tensor(np.zeros(shape))


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    _check_broadcast(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
        "add",
    )


def sub(a, b):
    _check_broadcast(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
        "sub",
    )


def mul(a, b):
    _check_broadcast(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
        "mul",
    )


def div(a, b):
    _check_broadcast(a, b, "div")
    return _make(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
        "div",
    )


def scale(a, s):
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,), "scale")


def shift(a, s):
    s = float(s)
    return _make(a.data + s, (a,), lambda g: (g,), "shift")


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.data.shape} x {b.data.shape}")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
        "matmul",
    )


def affine(x, w, b=None):
    """Fused x @ w + b for row features; equivalent to matmul plus add."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"affine: incompatible shapes {x.data.shape} x {w.data.shape}")
    out = x.data @ w.data
    if b is None:
        return _make(out, (x, w), lambda g: (g @ w.data.T, x.data.T @ g), "affine")
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"affine: bias {b.data.shape} does not match width {w.data.shape[1]}")
    return _make(
        out + b.data,
        (x, w, b),
        lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)),
        "affine",
    )


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-d tensor, got {a.data.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    if shape.count(-1) == 1:
        known = int(np.prod([s for s in shape if s != -1], dtype=np.int64))
        if known == 0 or a.data.size % known:
            raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}")
        shape = tuple(a.data.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}")
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),), "reshape")


# ---------------------------------------------------------------------------
# structure


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError:
        raise ShapeError(f"concat axis {axis}: incompatible shapes {[d.shape for d in datas]}") from None
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(out, tuple(tensors), grad_fn, "concat")


def narrow(a, axis, start, length):
    """Contiguous slice ``[start, start+length)`` along ``axis``."""
    if axis < 0 or axis >= a.data.ndim:
        raise ShapeError(f"narrow axis {axis} out of range for shape {a.data.shape}")
    if start < 0 or length <= 0 or start + length > a.data.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}) out of range for shape {a.data.shape} axis {axis}")
    index = tuple(slice(None) if ax != axis else slice(start, start + length) for ax in range(a.data.ndim))

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(a.data[index].copy(), (a,), grad_fn, "narrow")


def gather_rows(a, idx):
    """Rows ``a[idx]``; duplicate indices accumulate gradient additively."""
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-d tensor, got {a.data.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows needs a flat index list, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.data.shape[0]} rows")

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx].copy(), (a,), grad_fn, "gather_rows")


def repeat_cols(a, reps):
    """Repeat each column ``reps`` times in place: (n x h) -> (n x h*reps)."""
    if a.data.ndim != 2:
        raise ShapeError(f"repeat_cols needs a 2-d tensor, got {a.data.shape}")
    n, h = a.data.shape

    def grad_fn(g):
        return (g.reshape(n, h, reps).sum(axis=2),)

    return _make(np.repeat(a.data, reps, axis=1), (a,), grad_fn, "repeat_cols")


def segment_sum(a, segments, num_segments):
    """Sum rows of ``a`` into ``num_segments`` buckets given per-row ids."""
    if a.data.ndim != 2:
        raise ShapeError(f"segment_sum needs a 2-d tensor, got {a.data.shape}")
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape != (a.data.shape[0],):
        raise ShapeError(f"segment ids {seg.shape} do not match {a.data.shape[0]} rows")
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise ShapeError(f"segment id out of range for {num_segments} segments")
    out = np.zeros((num_segments, a.data.shape[1]))
    np.add.at(out, seg, a.data)
    return _make(out, (a,), lambda g: (g[seg],), "segment_sum")


def sum_(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.full(a.data.shape, g.reshape(())),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make(out, (a,), grad_fn, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# nonlinearities


def softmax(a, axis=-1):
    """Max-subtracted softmax; slices along ``axis`` sum to one."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _make(y, (a,), grad_fn, "softmax")


def logsumexp(a, axis=-1, keepdims=False):
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    soft = e / s

    def grad_fn(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (soft * gg,)

    return _make(out, (a,), grad_fn, "logsumexp")


def exp(a):
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def sigmoid(a):
    y = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    y = np.where(a.data >= 0, y, 1.0 - y)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a):
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(a):
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a, slope=0.2):
    mask = a.data > 0
    return _make(
        np.where(mask, a.data, slope * a.data),
        (a,),
        lambda g: (g * np.where(mask, 1.0, slope),),
        "leaky_relu",
    )


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_C3 = 3.0 * 0.044715


def gelu(a):
    """Tanh-form gelu; smooth, so friendly to finite-difference checks."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    half_1pt = 0.5 * (1.0 + t)
    y = x * half_1pt

    def grad_fn(g):
        d = half_1pt + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + _GELU_C3 * x2)
        return (g * d,)

    return _make(y, (a,), grad_fn, "gelu")


def softplus(a):
    y = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    sig = np.where(a.data >= 0, sig, 1.0 - sig)
    return _make(y, (a,), lambda g: (g * sig,), "softplus")


def dropout(a, rate, training, rng=None):
    """Inverted dropout: train-time scaling by 1/(1-rate); eval is identity."""
    if not 0.0 <= rate < 1.0:
        from .errors import ConfigError

        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return _make(a.data.copy(), (a,), lambda g: (g,), "dropout")
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# reductions used by the losses


def l1_norm(a):
    """Sum of absolute values; subgradient 0 at exact zeros."""
    return _make(np.abs(a.data).sum(), (a,), lambda g: (g.reshape(()) * np.sign(a.data),), "l1_norm")


def frobenius_sq(a):
    return _make((a.data * a.data).sum(), (a,), lambda g: (g.reshape(()) * 2.0 * a.data,), "frobenius_sq")


def layernorm(x, gain, bias, eps=1e-5):
    """Row-wise normalization over the last axis, then affine gain/bias."""
    if x.data.ndim != 2:
        raise ShapeError(f"layernorm expects a 2-d tensor, got {x.data.shape}")
    d = x.data.shape[1]
    if d < 1:
        raise ShapeError("layernorm needs last-axis length >= 1")
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layernorm gain/bias shapes {gain.data.shape}/{bias.data.shape} do not match width {d}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y * gain.data + bias.data

    def grad_fn(g):
        gy = g * gain.data
        gx = inv * (gy - gy.mean(axis=1, keepdims=True) - y * (gy * y).mean(axis=1, keepdims=True))
        return (gx, (g * y).sum(axis=0), g.sum(axis=0))

    return _make(out, (x, gain, bias), grad_fn, "layernorm")


def mha_core(q, k, v, heads):
    """Fused scaled-dot-product attention over column-partitioned heads.

    q, k, v are (rows x d) with d divisible by ``heads``; per head h,
    softmax(q_h k_h^T / sqrt(d/heads)) v_h, outputs re-concatenated.
    Returns (output, weights) where weights is the detached (heads, rq, rk)
    attention array for inspection.
    """
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ShapeError("mha_core expects 2-d q, k, v")
    d = q.data.shape[1]
    if k.data.shape[1] != d or v.data.shape[1] != d:
        raise ShapeError(f"mha_core widths differ: {q.data.shape}, {k.data.shape}, {v.data.shape}")
    if k.data.shape[0] != v.data.shape[0]:
        raise ShapeError(f"mha_core: {k.data.shape[0]} keys vs {v.data.shape[0]} values")
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    p = d // heads
    rq, rk = q.data.shape[0], k.data.shape[0]
    scale = 1.0 / math.sqrt(p)

    qh = q.data.reshape(rq, heads, p).transpose(1, 0, 2)
    kh = k.data.reshape(rk, heads, p).transpose(1, 0, 2)
    vh = v.data.reshape(rk, heads, p).transpose(1, 0, 2)
    scores = np.matmul(qh, kh.transpose(0, 2, 1)) * scale
    scores -= scores.max(axis=2, keepdims=True)
    e = np.exp(scores)
    weights = e / e.sum(axis=2, keepdims=True)
    out = np.matmul(weights, vh).transpose(1, 0, 2).reshape(rq, d)

    def grad_fn(g):
        gh = g.reshape(rq, heads, p).transpose(1, 0, 2)
        dv = np.matmul(weights.transpose(0, 2, 1), gh)
        da = np.matmul(gh, vh.transpose(0, 2, 1))
        ds = weights * (da - (da * weights).sum(axis=2, keepdims=True))
        dq = np.matmul(ds, kh) * scale
        dk = np.matmul(ds.transpose(0, 2, 1), qh) * scale
        return (
            dq.transpose(1, 0, 2).reshape(rq, d),
            dk.transpose(1, 0, 2).reshape(rk, d),
            dv.transpose(1, 0, 2).reshape(rk, d),
        )

    return _make(out, (q, k, v), grad_fn, "mha_core"), weights


def backward(loss):
    """Run reverse-mode accumulation for ``loss`` on the active tape."""
    t = active_tape()
    if t is None:
        raise ContractError("backward called with no active tape")
    t.backward(loss)


def zero_grads(parameters):
    for p in parameters:
        p.tensor.grad = None
