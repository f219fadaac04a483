"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

The engine is deliberately small: every operation eagerly computes its
forward value with numpy and, when gradients are being tracked, appends a
node to a thread-local tape. ``backward`` walks that tape once, in strict
reverse order, accumulating gradients additively into every tensor that
requires them. Tensors that appear on the tape are never mutated in place;
optimizer updates replace ``.data`` between steps, outside any recording.

Broadcasting is intentionally restricted: binary operations accept equal
shapes, or equal-rank shapes where an operand has extent 1 on an axis
(the bias-add / per-neighbor-weight patterns). Anything else is rejected.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericsError(FloatingPointError):
    """A tensor contains NaN or Inf where finite values are required."""


# ---------------------------------------------------------------------------
# Tape machinery
# ---------------------------------------------------------------------------


class TapeNode:
    """One recorded operation: op kind, inputs, output, and a backward closure.

    ``backward_fn`` maps the gradient flowing into the output to a list of
    gradient arrays aligned with ``inputs`` (``None`` for inputs that do not
    need gradients). Saved activations live in the closure.
    """

    __slots__ = ("op", "inputs", "out", "backward_fn")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], out: "Tensor",
                 backward_fn: Callable[[np.ndarray], list]):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class _TapeState(threading.local):
    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.enabled = True


_TAPE = _TapeState()


class no_tape:
    """Context manager that suspends tape recording (evaluation mode)."""

    def __enter__(self):
        self._prev = _TAPE.enabled
        _TAPE.enabled = False
        return self

    def __exit__(self, *exc):
        _TAPE.enabled = self._prev
        return False


def tape_size() -> int:
    return len(_TAPE.nodes)


def clear_tape() -> None:
    _TAPE.nodes.clear()


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """A dense n-dimensional array of float64 values.

    ``requires_grad`` marks the tensor for gradient accumulation; ``grad``
    holds d(loss)/d(self) after ``backward`` and always matches ``data``'s
    shape. Tensors produced by tracked operations inherit ``requires_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

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
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # Small amount of operator sugar; the function forms below are primary.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zero_grads(tensors) -> None:
    """Drop accumulated gradients on the given tensors (dict or iterable)."""
    if isinstance(tensors, dict):
        tensors = tensors.values()
    for t in tensors:
        t.grad = None


def validate_finite(t: Tensor, context: str = "tensor") -> Tensor:
    """Raise NumericsError if ``t`` holds any NaN or Inf values."""
    if not np.isfinite(t.data).all():
        bad = int(np.count_nonzero(~np.isfinite(t.data)))
        raise NumericsError(
            f"{context}: {bad} non-finite value(s) in tensor of shape {t.shape}"
        )
    return t


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
            backward_fn: Callable[[np.ndarray], list]) -> Tensor:
    out = Tensor(out_data)
    if _TAPE.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE.nodes.append(TapeNode(op, inputs, out, backward_fn))
    return out


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors, (m, k) @ (k, n) -> (m, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner extents disagree: {a.shape} @ {b.shape} "
            f"({a.shape[1]} vs {b.shape[0]})"
        )
    ad, bd = a.data, b.data

    def backward_fn(g):
        return [
            g @ bd.T if a.requires_grad else None,
            ad.T @ g if b.requires_grad else None,
        ]

    return _record("matmul", (a, b), ad @ bd, backward_fn)


def _broadcast_out_shape(sa: tuple[int, ...], sb: tuple[int, ...]) -> tuple[int, ...]:
    """Output shape for the restricted broadcast rule; raises ShapeError."""
    if sa == sb:
        return sa
    if len(sa) != len(sb):
        raise ShapeError(f"rank mismatch: {sa} vs {sb} (rank-changing broadcast rejected)")
    out = []
    for ea, eb in zip(sa, sb):
        if ea == eb:
            out.append(ea)
        elif ea == 1:
            out.append(eb)
        elif eb == 1:
            out.append(ea)
        else:
            raise ShapeError(f"incompatible shapes {sa} and {sb}")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` over the axes that were broadcast up from extent 1."""
    if g.shape == shape:
        return g
    axes = tuple(i for i, e in enumerate(shape) if e == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True)


def _binary(op: str, a: Tensor, b: Tensor, fwd, dfda, dfdb) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_out_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def backward_fn(g):
        return [
            _unbroadcast(dfda(g, ad, bd), sa) if a.requires_grad else None,
            _unbroadcast(dfdb(g, ad, bd), sb) if b.requires_grad else None,
        ]

    return _record(op, (a, b), fwd(ad, bd), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def scale(t: Tensor, c: float) -> Tensor:
    """Multiply every element by the Python scalar ``c``."""
    t = as_tensor(t)
    c = float(c)

    def backward_fn(g):
        return [g * c]

    return _record("scale", (t,), t.data * c, backward_fn)


def relu(t: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is defined as 0."""
    t = as_tensor(t)
    mask = t.data > 0.0

    def backward_fn(g):
        return [g * mask]

    return _record("relu", (t,), np.where(mask, t.data, 0.0), backward_fn)


def exp(t: Tensor) -> Tensor:
    t = as_tensor(t)
    out_data = np.exp(t.data)

    def backward_fn(g):
        return [g * out_data]

    return _record("exp", (t,), out_data, backward_fn)


def log(t: Tensor) -> Tensor:
    t = as_tensor(t)

    def backward_fn(g):
        return [g / t.data]

    return _record("log", (t,), np.log(t.data), backward_fn)


def softmax_lastdim(t: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction.

    Every last-axis slice of the result is nonnegative and sums to 1.
    Because the row maximum is subtracted first, the output is exactly
    shift-invariant: adding a constant to a row cannot change it.
    """
    t = as_tensor(t)
    if t.ndim < 1 or t.shape[-1] < 1:
        raise ShapeError(f"softmax_lastdim needs a non-empty last axis, got {t.shape}")
    if not np.isfinite(t.data).all():
        raise NumericsError("softmax_lastdim: non-finite input")
    shifted = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        return [y * (g - (g * y).sum(axis=-1, keepdims=True))]

    return _record("softmax", (t,), y, backward_fn)


_REDUCE_KINDS = ("sum", "mean", "max")


def reduce(t: Tensor, axis: int | None, kind: str, keepdims: bool = False) -> Tensor:
    """Reduce along ``axis`` (or all axes when None) with sum, mean, or max.

    Max routes its gradient to the first (lowest-index) winning element of
    each reduced slice, which makes tie handling deterministic.
    """
    t = as_tensor(t)
    if kind not in _REDUCE_KINDS:
        raise ValueError(f"unknown reduce kind {kind!r}, expected one of {_REDUCE_KINDS}")
    if axis is not None:
        if not -t.ndim <= axis < t.ndim:
            raise ShapeError(f"axis {axis} out of range for shape {t.shape}")
        axis = axis % t.ndim
    shape = t.shape

    if kind == "max":
        if axis is None:
            flat = t.data.reshape(-1)
            win = int(np.argmax(flat))
            out_data = flat[win:win + 1].reshape(() if not keepdims else (1,) * t.ndim)

            def backward_fn(g):
                buf = np.zeros(shape)
                buf.reshape(-1)[win] = np.asarray(g).reshape(())
                return [buf]
        else:
            win = np.argmax(t.data, axis=axis)
            win_e = np.expand_dims(win, axis)
            out_data = np.take_along_axis(t.data, win_e, axis=axis)
            if not keepdims:
                out_data = np.squeeze(out_data, axis=axis)

            def backward_fn(g):
                ge = g if keepdims else np.expand_dims(g, axis)
                buf = np.zeros(shape)
                np.put_along_axis(buf, win_e, ge, axis=axis)
                return [buf]

        return _record("reduce_max", (t,), out_data, backward_fn)

    n = t.data.size if axis is None else shape[axis]
    out_data = (t.data.sum(axis=axis, keepdims=keepdims) if kind == "sum"
                else t.data.mean(axis=axis, keepdims=keepdims))

    def backward_fn(g):
        ge = np.asarray(g)
        if not keepdims:
            ge = ge.reshape((1,) * t.ndim) if axis is None else np.expand_dims(ge, axis)
        gb = np.broadcast_to(ge, shape)
        return [gb / n if kind == "mean" else gb.copy()]

    return _record(f"reduce_{kind}", (t,), out_data, backward_fn)


def gather_rows(features: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a (N, C) tensor by an integer table of shape (M, k).

    out[i][j] == features[idx[i][j]]. The backward pass scatter-adds, so
    duplicate indices accumulate their upstream gradients.
    """
    features = as_tensor(features)
    if features.ndim != 2:
        raise ShapeError(f"gather_rows needs a rank-2 feature tensor, got {features.shape}")
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("gather_rows index table must be integer-typed")
    if idx.ndim != 2:
        raise ShapeError(f"gather_rows needs a rank-2 index table, got {idx.shape}")
    n = features.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(
            f"gather_rows index out of range: values must lie in [0, {n}), "
            f"got min {idx.min()} max {idx.max()}"
        )
    idx = idx.copy()
    shape = features.shape

    def backward_fn(g):
        buf = np.zeros(shape)
        np.add.at(buf, idx, g)
        return [buf]

    return _record("gather_rows", (features,), features.data[idx], backward_fn)


def take_per_row(t: Tensor, idx: np.ndarray) -> Tensor:
    """Select one element per row of a (N, C) tensor: out[i] = t[i, idx[i]]."""
    t = as_tensor(t)
    if t.ndim != 2:
        raise ShapeError(f"take_per_row needs a rank-2 tensor, got {t.shape}")
    idx = np.asarray(idx)
    if idx.shape != (t.shape[0],):
        raise ShapeError(f"take_per_row needs one index per row, got {idx.shape} for {t.shape}")
    n, c = t.shape
    if idx.size and (idx.min() < 0 or idx.max() >= c):
        raise IndexError(f"take_per_row column index out of range [0, {c})")
    rows = np.arange(n)
    idx = idx.copy()

    def backward_fn(g):
        buf = np.zeros((n, c))
        np.add.at(buf, (rows, idx), g)
        return [buf]

    return _record("take_per_row", (t,), t.data[rows, idx], backward_fn)


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    t = as_tensor(t)
    old = t.shape

    def backward_fn(g):
        return [g.reshape(old)]

    return _record("reshape", (t,), t.data.reshape(tuple(shape)), backward_fn)


def swapaxes(t: Tensor, a: int, b: int) -> Tensor:
    t = as_tensor(t)

    def backward_fn(g):
        return [np.swapaxes(g, a, b)]

    return _record("swapaxes", (t,), np.swapaxes(t.data, a, b).copy(), backward_fn)


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("stack_rows needs at least one tensor")
    shape = ts[0].shape
    for t in ts[1:]:
        if t.shape != shape:
            raise ShapeError(f"stack_rows shape mismatch: {shape} vs {t.shape}")

    def backward_fn(g):
        return [g[i] if t.requires_grad else None for i, t in enumerate(ts)]

    return _record("stack_rows", ts, np.stack([t.data for t in ts]), backward_fn)


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(x) to every requires_grad tensor on the tape.

    ``loss`` must be a scalar produced by the current tape. The tape is
    consumed: nodes are processed in strict reverse order and then cleared.
    Gradients accumulate additively into ``.grad`` (call ``zero_grads``
    between steps).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes = _TAPE.nodes
    pending: dict[int, list] = {id(loss): [loss, np.ones_like(loss.data)]}
    try:
        for node in reversed(nodes):
            entry = pending.pop(id(node.out), None)
            if entry is None:
                continue
            g_out = entry[1]
            if node.out.requires_grad:
                node.out.grad = g_out if node.out.grad is None else node.out.grad + g_out
            for t, g in zip(node.inputs, node.backward_fn(g_out)):
                if g is None:
                    continue
                slot = pending.get(id(t))
                if slot is None:
                    pending[id(t)] = [t, np.asarray(g, dtype=np.float64)]
                else:
                    slot[1] = slot[1] + g
        for t, g in pending.values():
            if t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g
    finally:
        nodes.clear()


def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar function to central differences.

    Returns the max over coordinates of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    Input coordinates within ``eps`` of 0 are excluded from the comparison
    (they may sit on a relu kink, where one-sided behavior is expected).
    """
    probe = Tensor(x.data.copy(), requires_grad=True, name=x.name)
    loss = fn(probe)
    if loss.data.size != 1:
        raise ShapeError("grad_check target function must be scalar-valued")
    backward(loss)
    analytic = (probe.grad if probe.grad is not None else np.zeros_like(probe.data)).reshape(-1)

    base = x.data.reshape(-1)
    numeric = np.zeros_like(base)
    with no_tape():
        for i in range(base.size):
            if abs(base[i]) <= eps:
                continue
            bumped = base.copy()
            bumped[i] = base[i] + eps
            f_plus = fn(Tensor(bumped.reshape(x.shape))).item()
            bumped[i] = base[i] - eps
            f_minus = fn(Tensor(bumped.reshape(x.shape))).item()
            numeric[i] = (f_plus - f_minus) / (2.0 * eps)

    max_err = 0.0
    for i in range(base.size):
        if abs(base[i]) <= eps:
            continue
        denom = max(1.0, abs(analytic[i]), abs(numeric[i]))
        max_err = max(max_err, abs(analytic[i] - numeric[i]) / denom)
    return max_err
