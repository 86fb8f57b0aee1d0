"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Tensors are immutable wrappers around ``np.ndarray``. When a :class:`Tape` is
active (``with Tape() as tape:``), every op whose inputs require gradients
appends a :class:`TapeNode` to it. Outside a tape, ops are evaluated eagerly
and nothing is recorded, which is how inference and cloud-side assembly run.

Model state is float32. Ops follow numpy dtype promotion, so float64 inputs
stay float64; the loss ops accumulate in float64 regardless of input dtype.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_VALUE = -1e9


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


class NumericFault(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ContractViolation(RuntimeError):
    """Raised when an op is called outside its preconditions."""


_state = threading.local()

# process-wide instrumentation; read by the coordination layer to prove that
# assembly never differentiates anything
_counters = {"backward_calls": 0, "recorded_nodes": 0}
_counter_lock = threading.Lock()


def counters() -> dict[str, int]:
    with _counter_lock:
        return dict(_counters)


def _bump(key: str, n: int = 1) -> None:
    with _counter_lock:
        _counters[key] += n


def _tape_stack() -> list["Tape"]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.node: TapeNode | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    __hash__ = object.__hash__

    # -- operators -----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return Tensor(arr)


def parameter(data, name: str | None = None) -> Tensor:
    """A trainable leaf (float32)."""
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(as_tensor(x).data)


@dataclass(eq=False)
class TapeNode:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence]
    tape: "Tape | None" = None


class _Sliced:
    """Gradient contribution that lands in a sub-region of the input."""

    __slots__ = ("index", "grad")

    def __init__(self, index, grad):
        self.index = index
        self.grad = grad


@dataclass(eq=False)
class Tape:
    nodes: list[TapeNode] = field(default_factory=list)
    visits: int = 0

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)
        _bump("recorded_nodes")

    def gradient(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> "GradMap":
        return backward(loss, wrt, tape=self)


class no_grad:
    """Suspend recording: ops evaluated inside never touch any tape."""

    def __enter__(self):
        stack = _tape_stack()
        self._saved = list(stack)
        stack.clear()
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        stack.clear()
        stack.extend(self._saved)


class GradMap(dict):
    """Mapping from leaf tensor to its gradient array."""

    def of(self, t: Tensor) -> np.ndarray:
        return self[t]


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None, tape: Tape | None = None) -> GradMap:
    """Reverse sweep over ``tape``; returns gradients for the requested leaves.

    Each node on the tape is visited exactly once, in reverse recording order
    (recording order is a topological order because tensors are immutable).
    Leaves in ``wrt`` that the loss does not depend on get zero gradients.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        if loss.node is None or loss.node.tape is None:
            raise ContractViolation("loss was not produced under a tape")
        tape = loss.node.tape
    _bump("backward_calls")

    grads: dict[int, list] = {id(loss): [np.ones((), dtype=loss.dtype), False]}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        tape.visits += 1
        entry = grads.pop(id(node.output), None)
        if entry is None:
            continue
        g = entry[0]
        for inp, gin in zip(node.inputs, node.vjp(g)):
            if gin is None or not inp.requires_grad:
                continue
            _accumulate(grads, inp, gin)
            if inp.node is None:
                leaves[id(inp)] = inp

    out = GradMap()
    targets = list(wrt) if wrt is not None else list(leaves.values())
    for t in targets:
        entry = grads.get(id(t))
        if entry is None:
            out[t] = np.zeros(t.shape, dtype=t.dtype)
        else:
            out[t] = np.asarray(entry[0], dtype=t.dtype).reshape(t.shape)
    return out


def _accumulate(grads: dict, inp: Tensor, gin) -> None:
    # a gradient always takes the dtype of its tensor (a float64 loss must not promote float32 graphs)
    key = id(inp)
    entry = grads.get(key)
    if isinstance(gin, _Sliced):
        if gin.grad.dtype != inp.dtype:
            gin = _Sliced(gin.index, gin.grad.astype(inp.dtype))
        if entry is None:
            buf = np.zeros(inp.shape, dtype=np.result_type(inp.dtype, gin.grad.dtype))
            grads[key] = entry = [buf, True]
        elif not entry[1]:
            entry[0] = np.array(entry[0], dtype=np.result_type(entry[0].dtype, gin.grad.dtype))
            entry[1] = True
        entry[0][gin.index] += gin.grad
        return
    if getattr(gin, "dtype", inp.dtype) != inp.dtype:
        gin = np.asarray(gin).astype(inp.dtype)
    if entry is None:
        grads[key] = [gin, False]
    elif entry[1]:
        entry[0] += gin
    else:
        entry[0] = entry[0] + gin
        entry[1] = True


# ---------------------------------------------------------------------------
# op plumbing


def _check_finite(arr: np.ndarray, kind: str) -> None:
    if arr.dtype.kind == "f" and arr.size:
        if not math.isfinite(float(np.sum(arr))):
            raise NumericFault(f"{kind} produced non-finite values")


def _make(kind: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    _check_finite(data, kind)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = TapeNode(kind, inputs, out, vjp, tape)
        out.node = node
        tape.record(node)
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                            unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _make("leaky_relu", a.data * scale, (a,), lambda g: (g * scale,))


def clamp_min(a, floor: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data >= floor
    out = np.where(keep, a.data, np.asarray(floor, dtype=a.dtype))
    return _make("clamp_min", out, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), vjp)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make("sum", np.asarray(out), (a,), vjp)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return reduce_sum(a, axis, keepdims) * (1.0 / max(count, 1))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]
    if _is_basic_index(index):
        def vjp(g):
            return (_Sliced(index, g),)
    else:
        def vjp(g):
            full = np.zeros(a.shape, dtype=g.dtype)
            np.add.at(full, index, g)
            return (full,)
    return _make("slice", np.array(out), (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    ndim = ts[0].ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim or any(t.shape[i] != ts[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat along axis {axis}: shapes {ts[0].shape} and {t.shape} disagree")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def vjp(g):
        parts = []
        for i in range(len(ts)):
            sl = [slice(None)] * ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _make("concat", np.concatenate([t.data for t in ts], axis=ax), ts, vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in ts]
    return concat(expanded, axis=axis)


def embedding(table, ids) -> Tensor:
    """Gather rows of ``table`` (n, d) at integer ``ids`` of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ContractViolation(f"embedding ids must be integers, got {ids.dtype}")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ContractViolation(f"embedding id out of range [0, {n}): min={ids.min()} max={ids.max()}")

    def vjp(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _make("embedding", table.data[ids], (table,), vjp)


# ---------------------------------------------------------------------------
# neural-network kernels


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (a,), vjp)


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (no affine part)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make("layer_norm", y.astype(x.dtype, copy=False), (x,), vjp)


def causal_scores(q, k, scale: float) -> Tensor:
    """Scaled ``q @ k^T`` with future positions (j > i) masked out."""
    q, k = as_tensor(q), as_tensor(k)
    if q.shape[-1] != k.shape[-1] or q.shape[-2] != k.shape[-2]:
        raise ShapeError(f"causal_scores: query {q.shape} and key {k.shape} disagree")
    t = q.shape[-2]
    future = np.triu(np.ones((t, t), dtype=bool), k=1)
    s = (q.data @ np.swapaxes(k.data, -1, -2)) * np.asarray(scale, dtype=q.dtype)
    s = np.where(future, np.asarray(MASK_VALUE, dtype=s.dtype), s)

    def vjp(g):
        g = np.where(future, 0, g) * np.asarray(scale, dtype=g.dtype)
        gq = unbroadcast(g @ k.data, q.shape) if q.requires_grad else None
        gk = unbroadcast(np.swapaxes(g, -1, -2) @ q.data, k.shape) if k.requires_grad else None
        return gq, gk

    return _make("causal_scores", s, (q, k), vjp)


def _shift_right(x: np.ndarray, shift: int) -> np.ndarray:
    """x[:, t] -> x[:, t - shift] along axis 1, zero filled."""
    if shift == 0:
        return x
    out = np.zeros_like(x)
    if shift < x.shape[1]:
        out[:, shift:] = x[:, :-shift]
    return out


def _shift_left(x: np.ndarray, shift: int) -> np.ndarray:
    if shift == 0:
        return x
    out = np.zeros_like(x)
    if shift < x.shape[1]:
        out[:, :-shift] = x[:, shift:]
    return out


def causal_conv1d(x, w, dilation: int = 1) -> Tensor:
    """Dilated causal convolution.

    ``x`` is (B, T, Cin); ``w`` is (K, Cin, Cout) or per-example (B, K, Cin, Cout).
    Output position t sees inputs t, t - dilation, ..., t - (K-1)*dilation.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim not in (3, 4):
        raise ShapeError(f"causal_conv1d: expected x (B,T,C) and w (...,K,Cin,Cout), got {x.shape} and {w.shape}")
    kernel, cin, cout = w.shape[-3:]
    if x.shape[-1] != cin:
        raise ShapeError(f"causal_conv1d: input channels {x.shape} do not match kernel {w.shape}")
    if dilation < 1:
        raise ContractViolation(f"dilation must be positive, got {dilation}")
    bsz, t, _ = x.shape
    shifts = [(kernel - 1 - i) * dilation for i in range(kernel)]
    cols = np.concatenate([_shift_right(x.data, s) for s in shifts], axis=-1)
    wmat = w.data.reshape(w.shape[:-3] + (kernel * cin, cout))
    out = cols @ wmat

    def vjp(g):
        gx = gw = None
        if x.requires_grad:
            gcols = g @ np.swapaxes(wmat, -1, -2)
            gx = np.zeros_like(x.data, dtype=gcols.dtype)
            for i, s in enumerate(shifts):
                gx = gx + _shift_left(gcols[..., i * cin:(i + 1) * cin], s)
        if w.requires_grad:
            gw = unbroadcast(np.swapaxes(cols, -1, -2) @ g, wmat.shape).reshape(w.shape)
        return gx, gw

    return _make("causal_conv1d", out, (x, w), vjp)


def cross_entropy(logits, targets, weights=None) -> Tensor:
    """Weighted mean of -log softmax(logits)[target] over the leading axes.

    Computed in float64. ``weights`` (same shape as ``targets``) selects and
    weights positions; the mean divides by its sum.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    n = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= n):
        raise ContractViolation(f"target id out of range [0, {n})")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    total = float(w.sum())
    if total <= 0:
        raise ContractViolation("cross_entropy needs at least one weighted position")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    nll = lse - picked
    loss = np.asarray((nll * w).sum() / total)

    def vjp(g):
        p = np.exp(z - lse[..., None])
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], axis=-1) - 1, axis=-1)
        return ((p * (w / total)[..., None] * g).astype(logits.dtype),)

    return _make("cross_entropy", loss, (logits,), vjp)


def gru_scan(xw, h0, w_hh, b_hh, mask=None) -> Tensor:
    """Fused GRU recurrence over precomputed input projections; returns the final state.

    ``xw`` (B, T, 3H) holds ``x @ w_ih + b_ih`` with gate order r, z, n. On steps
    where ``mask`` (B, T) is false the state is carried through. Equivalent to
    the step-by-step composite, with backpropagation through time done by hand.
    """
    xw, h0, w_hh, b_hh = as_tensor(xw), as_tensor(h0), as_tensor(w_hh), as_tensor(b_hh)
    bsz, steps, three_h = xw.shape
    hid = three_h // 3
    if steps == 0:
        raise ContractViolation("GRU input sequence is empty")
    if h0.shape != (bsz, hid) or w_hh.shape != (hid, three_h):
        raise ShapeError(f"gru_scan: state {h0.shape} / recurrent weights {w_hh.shape} do not fit {xw.shape}")
    dtype = np.result_type(xw.dtype, h0.dtype, w_hh.dtype)
    m_all = None if mask is None else np.asarray(mask, dtype=dtype)[..., None]
    h = h0.data.astype(dtype, copy=False)
    cache = []
    for t in range(steps):
        x_t = xw.data[:, t]
        hw = h @ w_hh.data + b_hh.data
        r = _sigmoid(x_t[:, :hid] + hw[:, :hid])
        z = _sigmoid(x_t[:, hid:2 * hid] + hw[:, hid:2 * hid])
        hn = hw[:, 2 * hid:]
        n = np.tanh(x_t[:, 2 * hid:] + r * hn)
        h_new = n + z * (h - n)
        m = None if m_all is None else m_all[:, t]
        cache.append((h, r, z, n, hn, m))
        h = h_new if m is None else h + m * (h_new - h)

    def vjp(g):
        gh = np.asarray(g, dtype=dtype)
        gxw = np.zeros((bsz, steps, three_h), dtype=dtype)
        gw = np.zeros(w_hh.shape, dtype=dtype)
        gb = np.zeros(b_hh.shape, dtype=dtype)
        w_t = w_hh.data.T
        for t in range(steps - 1, -1, -1):
            h_prev, r, z, n, hn, m = cache[t]
            if m is None:
                gnew, gcarry = gh, 0.0
            else:
                gnew, gcarry = m * gh, (1 - m) * gh
            dn = gnew * (1 - z)
            dz = gnew * (h_prev - n)
            da_n = dn * (1 - n * n)
            da_r = da_n * hn * r * (1 - r)
            da_z = dz * z * (1 - z)
            dhw = np.concatenate([da_r, da_z, da_n * r], axis=1)
            gxw[:, t] = np.concatenate([da_r, da_z, da_n], axis=1)
            gw += h_prev.T @ dhw
            gb += dhw.sum(axis=0)
            gh = gcarry + gnew * z + dhw @ w_t
        return (gxw.astype(xw.dtype), gh.astype(h0.dtype), gw.astype(w_hh.dtype), gb.astype(b_hh.dtype))

    return _make("gru_scan", h, (xw, h0, w_hh, b_hh), vjp)


def one_hot_argmax(a, axis: int = -1) -> np.ndarray:
    """Hard indicator of the (first) maximum along ``axis``."""
    arr = as_tensor(a).data
    idx = np.argmax(arr, axis=axis)
    out = np.zeros_like(arr)
    np.put_along_axis(out, np.expand_dims(idx, axis), 1, axis=axis)
    return out


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Value equals ``hard`` exactly; gradient flows to ``soft`` unchanged."""
    soft = as_tensor(soft)
    return add(Tensor(np.asarray(hard, dtype=soft.dtype)), sub(soft, stop_gradient(soft)))


def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)
