"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op checks shapes explicitly. The only implicit broadcast is
``add_bias`` (a vector added along the last axis); everything else must
match exactly or be expanded with ``repeat_leading``.
"""
from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError", "Tensor", "Tape", "tensor", "backward", "finite_diff_grad",
    "relative_error", "gradcheck",
    "matmul", "transpose", "permute", "reshape", "add", "sub", "add_bias", "mul",
    "scale", "repeat_leading", "sum_all", "mean_all", "gelu", "layer_norm",
    "softmax_lastdim", "log_softmax_lastdim", "cross_entropy", "concat",
    "take_rows", "take_along_last", "index_last", "dropout", "record",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _shape_error(op: str, a: tuple, b: tuple) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


class Tensor:
    """A float64 array with an optional gradient slot.

    ``data`` is never mutated by the ops in this module, so tensors can be
    shared read-only.  ``node_id`` is set when the tensor was produced by an
    op recorded on a tape.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.node_id = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


class _Record:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive ops, used as a context manager.

    >>> with Tape() as tape:
    ...     loss = sum_all(mul(x, x))
    >>> grads = backward(tape, loss)
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def _push(self, inputs: tuple[Tensor, ...], output: Tensor, backward_fn) -> None:
        output.node_id = len(self.records)
        output.requires_grad = True
        self.records.append(_Record(inputs, output, backward_fn))


def record(out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``out`` as a Tensor and record it on the active tape if needed.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    Use this to define new primitives outside this module.
    """
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("operation produced non-finite values")
    result = Tensor._wrap(out)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape._push(tuple(inputs), result, backward_fn)
    return result


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(tape: Tape, loss: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Propagate d(loss) back through ``tape``.

    Gradients are written to ``.grad`` of every leaf (a tensor with
    ``requires_grad`` that was not produced on the tape).  Leaves passed in
    ``leaves`` that do not participate receive zeros.  Returns a mapping
    ``id(leaf) -> gradient``.
    """
    if loss.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    leaf_objs: dict[int, Tensor] = {}
    if leaves is not None:
        for leaf in leaves:
            leaf_objs[id(leaf)] = leaf
    if loss.node_id is not None and not (
        loss.node_id < len(tape.records) and tape.records[loss.node_id].output is loss
    ):
        raise ValueError("backward: loss was not produced on this tape")

    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.backward_fn(g)
        for inp, ig in zip(rec.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.shape:
                raise ShapeError(f"backward: gradient shape {ig.shape} does not match input {inp.shape}")
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
            if inp.node_id is None:
                leaf_objs[key] = inp

    out: dict[int, np.ndarray] = {}
    for key, leaf in leaf_objs.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros(leaf.shape)
        leaf.grad = g
        out[key] = g
    return out


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    base = np.array(x.data, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.empty_like(flat)

    def evaluate(arr: np.ndarray) -> float:
        val = f(Tensor(arr))
        v = val.item() if isinstance(val, Tensor) else float(val)
        if not math.isfinite(v):
            raise FloatingPointError("finite_diff_grad: function returned a non-finite value")
        return v

    for i in range(flat.size):
        plus = flat.copy()
        plus[i] += h
        minus = flat.copy()
        minus[i] -= h
        grad[i] = (evaluate(plus.reshape(base.shape)) - evaluate(minus.reshape(base.shape))) / (2 * h)
    return Tensor(grad.reshape(base.shape))


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)``.

    The floor keeps identically-zero gradients (e.g. a key bias under
    softmax) from turning finite-difference noise into a large ratio.
    """
    scale_ = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale_)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> list[float]:
    """Relative error between tape gradients and central differences, per input.

    ``fn(*inputs)`` must return a scalar Tensor.
    """
    leaves = [Tensor(t.data, requires_grad=True) for t in inputs]
    with Tape() as tape:
        loss = fn(*leaves)
    backward(tape, loss, leaves=leaves)
    errors = []
    for i, leaf in enumerate(leaves):
        def f_i(x, i=i):
            args = [Tensor(t.data) for t in leaves]
            args[i] = x
            return fn(*args)
        errors.append(relative_error(leaf.grad, finite_diff_grad(f_i, leaf, h).data))
    return errors


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across every leading slice of ``a``) or has
    exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a.shape, b.shape)
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise _shape_error("matmul", a.shape, b.shape)
    A, B = a.data, b.data
    out = A @ B

    def bw(g):
        ga = g @ np.swapaxes(B, -1, -2)
        if B.ndim == 2:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return record(out, (a, b), bw)


def transpose(t: Tensor) -> Tensor:
    """Swap the last two axes."""
    if t.ndim < 2:
        raise ShapeError(f"transpose: need at least 2 axes, got shape {t.shape}")
    return record(np.swapaxes(t.data, -1, -2).copy(), (t,), lambda g: (np.swapaxes(g, -1, -2),))


def permute(t: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(t.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {t.shape}")
    inv = tuple(np.argsort(axes))
    return record(np.ascontiguousarray(np.transpose(t.data, axes)), (t,),
                  lambda g: (np.transpose(g, inv),))


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if shape.count(-1) == 1:
        known = int(np.prod([s for s in shape if s != -1]))
        if known and t.size % known == 0:
            shape = tuple(t.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != t.size:
        raise _shape_error("reshape", t.shape, shape)
    src = t.shape
    return record(t.data.reshape(shape).copy(), (t,), lambda g: (g.reshape(src),))


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("add", a.shape, b.shape)
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("sub", a.shape, b.shape)
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def add_bias(t: Tensor, bias: Tensor) -> Tensor:
    """Add a vector along the last axis of ``t``."""
    if bias.ndim != 1 or t.ndim < 1 or t.shape[-1] != bias.shape[0]:
        raise _shape_error("add_bias", t.shape, bias.shape)
    return record(t.data + bias.data, (t, bias),
                  lambda g: (g, g.reshape(-1, g.shape[-1]).sum(axis=0)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("mul", a.shape, b.shape)
    A, B = a.data, b.data
    return record(A * B, (a, b), lambda g: (g * B, g * A))


def scale(t: Tensor, c: float) -> Tensor:
    c = float(c)
    return record(t.data * c, (t,), lambda g: (g * c,))


def repeat_leading(t: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of ``t`` along a new leading axis."""
    out = np.broadcast_to(t.data, (n,) + t.shape).copy()
    return record(out, (t,), lambda g: (g.sum(axis=0),))


def sum_all(t: Tensor) -> Tensor:
    shape = t.shape
    return record(np.array(t.data.sum()), (t,), lambda g: (np.full(shape, float(g)),))


def mean_all(t: Tensor) -> Tensor:
    shape, n = t.shape, t.size
    return record(np.array(t.data.mean()), (t,), lambda g: (np.full(shape, float(g) / n),))


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(t: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = t.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return record(x * cdf, (t,), lambda g: (g * (cdf + x * pdf),))


def layer_norm(t: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    d = t.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {t.shape} with gain {gain.shape}, bias {bias.shape}")
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gain.data

    def bw(g):
        gx_hat = g * G
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return gx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return record(xhat * G + bias.data, (t, gain, bias), bw)


def _check_mask(t: Tensor, mask) -> np.ndarray | None:
    if mask is None:
        return None
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask).astype(bool)
    if m.shape != t.shape:
        raise _shape_error("softmax mask", t.shape, m.shape)
    if t.shape[-1] and not np.all(m.any(axis=-1)):
        raise ValueError("softmax: a row is fully masked, distribution undefined")
    return m


def softmax_lastdim(t: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` marks entries that may receive mass."""
    if t.ndim < 1 or t.shape[-1] < 1:
        raise ShapeError(f"softmax: empty last axis in shape {t.shape}")
    m = _check_mask(t, mask)
    x = t.data if m is None else np.where(m, t.data, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=-1, keepdims=True)
    if m is not None:
        p = np.where(m, p, 0.0)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return record(p, (t,), bw)


def log_softmax_lastdim(t: Tensor) -> Tensor:
    x = t.data - t.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=-1, keepdims=True))
    out = x - lse
    p = np.exp(out)
    return record(out, (t,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``.

    ``logits`` is (N, V).  ``weights`` (length N, 0/1) selects the rows that
    count; with no selected rows the loss is exactly 0 with zero gradient.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, v = logits.shape
    if tgt.shape[0] != n:
        raise _shape_error("cross_entropy", logits.shape, tgt.shape)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != n:
        raise _shape_error("cross_entropy weights", logits.shape, w.shape)
    if np.any((tgt < 0) | (tgt >= v)) and np.any(w[(tgt < 0) | (tgt >= v)] != 0):
        raise IndexError("cross_entropy: target id out of range")
    safe_t = np.clip(tgt, 0, v - 1)
    x = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=-1, keepdims=True))
    logp = x - lse
    denom = max(w.sum(), 1.0)
    nll = -logp[np.arange(n), safe_t]
    loss = np.array((nll * w).sum() / denom)

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), safe_t] -= 1.0
        return (p * (w[:, None] * float(g) / denom),)

    return record(loss, (logits,), bw)


# ---------------------------------------------------------------- structural

def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not ts:
        raise ValueError("concat: nothing to concatenate")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise _shape_error("concat", ts[0].shape, t.shape)
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return record(out, tuple(ts), lambda g: tuple(np.split(g, bounds, axis=ax)))


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    idx = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take_rows: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"take_rows: id out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def bw(g):
        gt = np.zeros(shape)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return record(table.data[idx], (table,), bw)


def take_along_last(t: Tensor, idx) -> Tensor:
    """``out[..., i, j] = t[..., i, idx[i, j]]`` for a fixed 2-D index matrix."""
    index = np.asarray(idx, dtype=np.int64)
    if t.ndim < 2 or index.ndim != 2 or index.shape[0] != t.shape[-2]:
        raise _shape_error("take_along_last", t.shape, index.shape)
    if index.size and (index.min() < 0 or index.max() >= t.shape[-1]):
        raise IndexError("take_along_last: index out of range")
    full = np.broadcast_to(index, t.shape[:-2] + index.shape)
    shape = t.shape

    def bw(g):
        gt = np.zeros(shape)
        # row i scatters its n entries into the 2k+1 slots of row i
        m = shape[-1]
        flat_g = g.reshape(-1, index.shape[0], index.shape[1])
        flat_gt = gt.reshape(-1, index.shape[0], m)
        for c in range(m):
            sel = index == c
            if sel.any():
                flat_gt[:, :, c] = (flat_g * sel).sum(axis=-1)
        return (gt,)

    return record(np.take_along_axis(t.data, full, axis=-1), (t,), bw)


def index_last(t: Tensor, idx) -> Tensor:
    """``out[..., i, j] = t[..., idx[i, j]]`` (lookup of a kernel by offset)."""
    index = np.asarray(idx, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= t.shape[-1]):
        raise IndexError("index_last: index out of range")
    shape = t.shape

    def bw(g):
        gt = np.zeros(shape)
        flat_g = g.reshape(shape[:-1] + (-1,))
        flat_i = index.reshape(-1)
        for c in range(shape[-1]):
            sel = flat_i == c
            if sel.any():
                gt[..., c] = flat_g[..., sel].sum(axis=-1)
        return (gt,)

    return record(t.data[..., index], (t,), bw)


def dropout(t: Tensor, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout with a Bernoulli keep-mask drawn from ``rng``."""
    if not training or p <= 0.0:
        return t
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: probability {p} outside [0, 1)")
    keep = (rng.random(t.shape) >= p) / (1.0 - p)
    return record(t.data * keep, (t,), lambda g: (g * keep,))
