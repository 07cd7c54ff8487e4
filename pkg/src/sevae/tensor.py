"""Reverse-mode automatic differentiation over float64 numpy arrays.

A dynamic tape: ops executed inside a ``with Tape() as tp`` block append one
node each, in execution order, and ``tp.backward(loss)`` replays them once in
reverse, accumulating gradients additively. Outside a tape, the same ops run
plain forward math with no recording, which is the evaluation path.

Every op validates its output for NaN/Inf and fails fast naming the op;
models therefore never silently train on poisoned values. All data is
float64 throughout -- finite-difference verification needs the headroom.

The op set is deliberately small: matmul (incl. stacked 3-D), affine,
elementwise arithmetic and activations, concat/slice/reshape/transpose,
reductions, embedding lookup, softmax / log-softmax / logsumexp,
cross-entropy, layer norm, dropout, and a fused LSTM sequence op whose
forward/backward run through the kernels backend. Everything else in the
package is composed from these.
"""

import threading

import numpy as np

from . import kernels
from .errors import GraphError, NumericsError

_STATE = threading.local()


def _active_tape():
    return getattr(_STATE, "tape", None)


class Tensor:
    """A float64 array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_tape", "_node_id")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tape = None
        self._node_id = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; scalars and arrays are lifted to constant tensors
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of ops for one forward pass.

    Nodes are (inputs, backward_fn, out): ``backward_fn(out_grad)`` returns
    one gradient array per input (or None for inputs that need none).
    Tapes do not nest; evaluation code simply runs outside any tape.
    """

    def __init__(self):
        self.nodes = []
        self._done = False

    def __enter__(self):
        if _active_tape() is not None:
            raise GraphError("tapes do not nest")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tape = None
        return False

    def backward(self, loss):
        """Populate .grad on every requires_grad leaf reachable from loss.

        Leaf gradients accumulate additively across backward calls (gradient
        accumulation over a logical batch); use zero_grad to reset.
        """
        if not isinstance(loss, Tensor):
            raise GraphError("backward expects a Tensor loss")
        if loss.data.ndim != 0:
            raise GraphError(f"non-scalar loss of shape {loss.data.shape}")
        if loss._tape is not self or loss._node_id < 0:
            raise GraphError("backward before forward: loss was not recorded on this tape")
        grads = {loss._node_id: np.ones((), dtype=np.float64)}
        for node_id in range(len(self.nodes) - 1, -1, -1):
            out_grad = grads.pop(node_id, None)
            if out_grad is None:
                continue
            inputs, backward_fn, _out = self.nodes[node_id]
            in_grads = backward_fn(out_grad)
            for tensor, grad in zip(inputs, in_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor._tape is self and tensor._node_id >= 0:
                    prev = grads.get(tensor._node_id)
                    grads[tensor._node_id] = grad if prev is None else prev + grad
                else:
                    if tensor.grad is None:
                        tensor.grad = np.zeros_like(tensor.data)
                    tensor.grad = tensor.grad + grad
        self._done = True


def as_tensor(x):
    """Lift scalars and arrays to constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _check_finite(arr, op_name):
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values in output of op '{op_name}'")


def _from_op(op_name, out_data, inputs, backward_fn):
    _check_finite(out_data, op_name)
    out = Tensor(out_data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        out._tape = tape
        out._node_id = len(tape.nodes)
        tape.nodes.append((tuple(inputs), backward_fn, out))
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _from_op("add", a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _from_op("sub", a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _from_op("mul", ad * bd, (a, b), backward)


def neg(a):
    a = as_tensor(a)

    def backward(g):
        return (-g,)

    return _from_op("neg", -a.data, (a,), backward)


def matmul(a, b):
    """np.matmul semantics for 1-D/2-D operands and equal-batch 3-D stacks."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim >= 3 or bd.ndim >= 3:
        if ad.shape[:-2] != bd.shape[:-2]:
            raise GraphError("stacked matmul requires identical batch dims")
    out = np.matmul(ad, bd)

    def backward(g):
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:  # (k,) @ (k,n) -> (n,)
            return np.matmul(bd, g), np.outer(ad, g)
        if bd.ndim == 1:  # (m,k) @ (k,) -> (m,)
            return np.outer(g, bd), np.matmul(ad.T, g)
        return (
            np.matmul(g, np.swapaxes(bd, -1, -2)),
            np.matmul(np.swapaxes(ad, -1, -2), g),
        )

    return _from_op("matmul", out, (a, b), backward)


def affine(x, w, b):
    """x @ w + b in one node; b broadcasts over leading dims."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    xd, wd = x.data, w.data
    out = np.matmul(xd, wd) + b.data

    def backward(g):
        if xd.ndim == 1:
            dx = np.matmul(wd, g)
            dw = np.outer(xd, g)
        else:
            dx = np.matmul(g, wd.T)
            dw = np.matmul(xd.T, g)
        return dx, dw, _unbroadcast(g, b.data.shape)

    return _from_op("affine", out, (x, w, b), backward)


# ---------------------------------------------------------------------------
# activations and elementwise transforms


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _from_op("tanh", out, (a,), backward)


def sigmoid(a):
    a = as_tensor(a)
    # split by sign for stability at large magnitudes
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _from_op("sigmoid", out, (a,), backward)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _from_op("relu", np.where(mask, a.data, 0.0), (a,), backward)


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _from_op("exp", out, (a,), backward)


def clamp(a, lo, hi):
    """Clip values to [lo, hi]; gradient flows only where unclipped."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        return (g * inside,)

    return _from_op("clamp", np.clip(a.data, lo, hi), (a,), backward)


def dropout(a, p, rng):
    """Inverted dropout; call only on the training path with a seeded rng."""
    a = as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise GraphError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p) / (1.0 - p)

    def backward(g):
        return (g * keep,)

    return _from_op("dropout", a.data * keep, (a,), backward)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape

    def backward(g):
        return (g.reshape(old),)

    return _from_op("reshape", a.data.reshape(shape), (a,), backward)


def transpose(a, axes):
    a = as_tensor(a)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _from_op("transpose", np.ascontiguousarray(np.transpose(a.data, axes)), (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise GraphError("concat of zero tensors")
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _from_op("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise GraphError("stack of zero tensors")

    def backward(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(np.ascontiguousarray(moved[i]) for i in range(len(tensors)))

    return _from_op("stack", np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    a = as_tensor(a)
    if start < 0 or start + length > a.data.shape[axis]:
        raise GraphError(
            f"narrow [{start}, {start + length}) out of range for axis {axis} of shape {a.data.shape}"
        )
    index = tuple(slice(None) if d != axis else slice(start, start + length) for d in range(a.data.ndim))

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _from_op("narrow", np.ascontiguousarray(a.data[index]), (a,), backward)


def flip0(a):
    """Reverse along axis 0 (drives the backward direction of the BiLSTM)."""
    a = as_tensor(a)

    def backward(g):
        return (np.ascontiguousarray(g[::-1]),)

    return _from_op("flip0", np.ascontiguousarray(a.data[::-1]), (a,), backward)


def repeat_row(v, n):
    """Tile a vector into n identical rows; gradient sums over rows."""
    v = as_tensor(v)
    if v.data.ndim != 1:
        raise GraphError("repeat_row expects a vector")

    def backward(g):
        return (g.sum(axis=0),)

    return _from_op("repeat_row", np.tile(v.data, (n, 1)), (v,), backward)


# ---------------------------------------------------------------------------
# reductions


def sum_(a, axis=None):
    a = as_tensor(a)
    shape = a.data.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _from_op("sum", a.data.sum(axis=axis), (a,), backward)


def mean(a, axis=None):
    a = as_tensor(a)
    shape = a.data.shape
    count = a.data.size if axis is None else shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, shape).copy(),)

    return _from_op("mean", a.data.mean(axis=axis), (a,), backward)


def max_(a, axis=None):
    """Max reduction; ties route the gradient to the first maximum."""
    a = as_tensor(a)
    ad = a.data
    if axis is None:
        flat_idx = int(np.argmax(ad))

        def backward(g):
            full = np.zeros_like(ad)
            full.flat[flat_idx] = g
            return (full,)

        return _from_op("max", ad.max(), (a,), backward)

    idx = np.argmax(ad, axis=axis)

    def backward(g):
        full = np.zeros_like(ad)
        grid = np.ogrid[tuple(slice(s) for s in idx.shape)]
        sel = list(grid)
        sel.insert(axis if axis >= 0 else ad.ndim + axis, idx)
        full[tuple(sel)] = g
        return (full,)

    return _from_op("max", ad.max(axis=axis), (a,), backward)


# ---------------------------------------------------------------------------
# lookup and normalization


def embedding(table, ids):
    """Row gather from a (V, E) table; backward scatter-adds into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise GraphError("embedding ids must be a 1-D index array")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise GraphError(f"embedding id out of range [0, {table.data.shape[0]})")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _from_op("embedding", table.data[ids], (table,), backward)


def _require_finite_input(a, op_name):
    if not np.all(np.isfinite(a.data)):
        raise NumericsError(f"non-finite input to op '{op_name}'")


def softmax(a, axis=-1):
    """Stable softmax; translation-invariant and order-preserving."""
    a = as_tensor(a)
    _require_finite_input(a, "softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _from_op("softmax", out, (a,), backward)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    _require_finite_input(a, "log_softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _from_op("log_softmax", out, (a,), backward)


def logsumexp(a, axis=None):
    """log sum exp with max-shift; exact under translation of the input."""
    a = as_tensor(a)
    if a.data.size == 0:
        raise NumericsError("empty reduction in logsumexp")
    _require_finite_input(a, "logsumexp")
    m = a.data.max(axis=axis, keepdims=True)
    out = np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True)) + m
    soft = np.exp(a.data - out)
    if axis is None:
        out = out.reshape(())
    else:
        out = out.squeeze(axis=axis)

    def backward(g):
        if axis is None:
            return (soft * g,)
        return (soft * np.expand_dims(g, axis),)

    return _from_op("logsumexp", out, (a,), backward)


def cross_entropy(logits, targets):
    """Summed negative log-likelihood of integer targets under row softmax.

    logits: (T, V) or (V,); targets: (T,) int array or scalar int.
    Returns a 0-d tensor: sum_t -log softmax(logits_t)[target_t].
    """
    logits = as_tensor(logits)
    _require_finite_input(logits, "cross_entropy")
    ld = logits.data
    single = ld.ndim == 1
    rows = ld[None, :] if single else ld
    tgt = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if rows.shape[0] != tgt.shape[0]:
        raise GraphError(f"cross_entropy got {rows.shape[0]} rows but {tgt.shape[0]} targets")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= rows.shape[1]):
        raise GraphError(f"cross_entropy target out of range [0, {rows.shape[1]})")
    shifted = rows - rows.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    picked = logp[np.arange(tgt.shape[0]), tgt]
    out = -picked.sum()

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(tgt.shape[0]), tgt] -= 1.0
        grad *= g
        return (grad[0] if single else grad,)

    return _from_op("cross_entropy", out, (logits,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        axes = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _from_op("layer_norm", out, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# fused recurrence


def lstm_seq(x, wx, whT, b, h0, c0):
    """Full LSTM pass over a (T, E) input; returns hidden states (T, H).

    One tape node for the entire sequence; the time loop runs inside the
    kernels backend. whT holds the recurrent weights transposed, (4H, H).
    """
    x, wx, whT, b, h0, c0 = (as_tensor(t) for t in (x, wx, whT, b, h0, c0))
    xw = np.matmul(x.data, wx.data) + b.data
    hs, cs, gates = kernels.lstm_forward(xw, whT.data, h0.data, c0.data)

    def backward(g):
        dgates, dh0, dc0 = kernels.lstm_backward(
            np.ascontiguousarray(g), gates, cs, whT.data, c0.data
        )
        hprev = np.vstack((h0.data[None, :], hs[:-1]))
        dwhT = np.matmul(dgates.T, hprev)
        dx = np.matmul(dgates, wx.data.T)
        dwx = np.matmul(x.data.T, dgates)
        db = dgates.sum(axis=0)
        return dx, dwx, dwhT, db, dh0, dc0

    return _from_op("lstm_seq", hs, (x, wx, whT, b, h0, c0), backward)


# ---------------------------------------------------------------------------
# parameter constructors


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def uniform_param(rng, shape, scale=0.1):
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)


def xavier_param(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)


def zero_grads(params):
    """Reset gradients on a mapping or iterable of tensors."""
    values = params.values() if hasattr(params, "values") else params
    for p in values:
        p.zero_grad()
