"""Reverse-mode automatic differentiation over float64 numpy arrays.

A ``Tape`` records every operation of one forward pass (define-by-run).
``Tape.backward(loss)`` walks the recorded ops in reverse and accumulates
gradients into ``Tensor.grad``.  The engine is deliberately small: dense
arrays only, no views into shared storage, and exactly the operation set
the rest of the package needs.  Custom differentiable ops (the homography
solve and grid warp) register themselves through ``Tape.record``.

Gradient semantics:
  * after ``backward``, every requires-grad tensor on the tape has a grad
    array; tensors unreachable from the loss get zeros, not None;
  * repeated ``backward`` calls accumulate into ``grad`` unless cleared
    with ``Tape.zero_grad``;
  * constants (requires_grad=False) stop propagation.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "TapeError",
    "GradCheckError",
    "concat",
    "stack_rows",
    "grad_check",
    "stable_sigmoid",
]


class TapeError(RuntimeError):
    """Raised on tape misuse: mixed tapes, non-scalar loss, bad shapes."""


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Overflow-free logistic; shared by the taped op and value-level code."""
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


class GradCheckError(RuntimeError):
    """Raised when a finite-difference probe evaluates to a non-finite value."""


class Tensor:
    """A node in the computation tape: float64 values plus optional grad."""

    __slots__ = ("tape", "values", "grad", "requires_grad", "node_id")

    def __init__(self, tape: "Tape", values: np.ndarray, requires_grad: bool, node_id: int):
        self.tape = tape
        self.values = values
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = node_id

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    # ---- arithmetic -----------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.tape is not self.tape:
                raise TapeError("operands belong to different tapes")
            return other
        return self.tape.const(other)

    def __add__(self, other):
        other = self._coerce(other)
        return self.tape._binary("add", self, other, self.values + other.values,
                                 lambda g: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        return self.tape._binary("sub", self, other, self.values - other.values,
                                 lambda g: (g, -g))

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self.values, other.values
        return self.tape._binary("mul", self, other, a * b,
                                 lambda g: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self.values, other.values
        out = a / b
        return self.tape._binary("div", self, other, out,
                                 lambda g: (g / b, -g * out / b))

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __neg__(self):
        return self.tape._unary("neg", self, -self.values, lambda g: -g)

    def __matmul__(self, other):
        return self.matmul(other)

    # ---- linear algebra -------------------------------------------------

    def matmul(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self.values, other.values
        if a.ndim not in (1, 2) or b.ndim not in (1, 2):
            raise TapeError("matmul supports 1-D and 2-D operands only")
        out = a @ b

        def backward(g):
            if a.ndim == 2 and b.ndim == 2:
                return g @ b.T, a.T @ g
            if a.ndim == 2 and b.ndim == 1:
                return np.outer(g, b), a.T @ g
            if a.ndim == 1 and b.ndim == 2:
                return g @ b.T, np.outer(a, g)
            return g * b, g * a  # 1-D dot product, g scalar

        return self.tape._binary("matmul", self, other, out, backward)

    # ---- elementwise nonlinearities --------------------------------------

    def tanh(self) -> "Tensor":
        out = np.tanh(self.values)
        return self.tape._unary("tanh", self, out, lambda g: g * (1.0 - out * out))

    def sigmoid(self) -> "Tensor":
        out = stable_sigmoid(self.values)
        return self.tape._unary("sigmoid", self, out, lambda g: g * out * (1.0 - out))

    def relu(self) -> "Tensor":
        mask = self.values > 0
        return self.tape._unary("relu", self, np.where(mask, self.values, 0.0),
                                lambda g: g * mask)

    def exp(self) -> "Tensor":
        out = np.exp(self.values)
        return self.tape._unary("exp", self, out, lambda g: g * out)

    def log(self) -> "Tensor":
        x = self.values
        return self.tape._unary("log", self, np.log(x), lambda g: g / x)

    def clamp(self, lo: float, hi: float) -> "Tensor":
        x = self.values
        mask = (x >= lo) & (x <= hi)
        return self.tape._unary("clamp", self, np.clip(x, lo, hi), lambda g: g * mask)

    def softmax(self, axis: int = -1) -> "Tensor":
        x = self.values
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            dot = (g * out).sum(axis=axis, keepdims=True)
            return out * (g - dot)

        return self.tape._unary("softmax", self, out, backward)

    # ---- reductions and shape ops ----------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        x = self.values
        out = x.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is None:
                return np.broadcast_to(g, x.shape).copy()
            ga = g if keepdims else np.expand_dims(g, axis)
            return np.broadcast_to(ga, x.shape).copy()

        return self.tape._unary("sum", self, out, backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        x = self.values
        out = x.mean(axis=axis, keepdims=keepdims)
        count = x.size if axis is None else x.size // out.size

        def backward(g):
            if axis is None:
                return np.broadcast_to(g / count, x.shape).copy()
            ga = g if keepdims else np.expand_dims(g, axis)
            return np.broadcast_to(ga / count, x.shape).copy()

        return self.tape._unary("mean", self, out, backward)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        old = self.values.shape
        return self.tape._unary("reshape", self, self.values.reshape(shape),
                                lambda g: g.reshape(old))

    def slice(self, index) -> "Tensor":
        """Static basic slice; ``index`` is an int, slice, or tuple of them."""
        x = self.values
        out = np.ascontiguousarray(x[index])

        def backward(g):
            gx = np.zeros_like(x)
            gx[index] = g
            return gx

        return self.tape._unary("slice", self, out, backward)

    def __getitem__(self, index):
        return self.slice(index)

    def gather_rows(self, idx: np.ndarray) -> "Tensor":
        """out[i] = self[i, idx[i]] for a 2-D tensor and integer index array."""
        x = self.values
        rows = np.arange(x.shape[0])
        out = x[rows, idx]

        def backward(g):
            gx = np.zeros_like(x)
            gx[rows, idx] = g
            return gx

        return self.tape._unary("gather_rows", self, out, backward)

    def detach(self) -> "Tensor":
        """Constant copy of this tensor on the same tape; blocks gradients."""
        return self.tape.const(self.values)

    def item(self) -> float:
        return float(self.values)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tape:
    """Ordered record of one forward pass.

    Every op appends (kind, output, inputs, backward_fn); inputs are always
    recorded before the ops that consume them, so the list is already a
    topological order and reverse iteration implements backpropagation.
    """

    def __init__(self):
        self._ops: list = []
        self._tracked: list = []  # requires-grad tensors, for zero-fill after backward
        self._next_id = 0

    # ---- tensor creation --------------------------------------------------

    def _new(self, values: np.ndarray, requires_grad: bool) -> Tensor:
        t = Tensor(self, values, requires_grad, self._next_id)
        self._next_id += 1
        if requires_grad:
            self._tracked.append(t)
        return t

    def leaf(self, values, requires_grad: bool = False) -> Tensor:
        arr = np.array(values, dtype=np.float64)
        return self._new(arr, requires_grad)

    def const(self, values) -> Tensor:
        arr = np.asarray(values, dtype=np.float64)
        return self._new(arr, False)

    # ---- op recording -----------------------------------------------------

    def record(self, kind: str, out_values: np.ndarray, inputs: tuple, backward) -> Tensor:
        """Register a custom op.  ``backward(g)`` returns one grad per input
        (None for inputs that take no gradient)."""
        for t in inputs:
            if t.tape is not self:
                raise TapeError("input tensor belongs to a different tape")
        requires = any(t.requires_grad for t in inputs)
        out = self._new(out_values, requires)
        if requires:
            self._ops.append((kind, out, inputs, backward))
        return out

    def _unary(self, kind, a, out_values, backward):
        return self.record(kind, out_values, (a,), lambda g: (backward(g),))

    def _binary(self, kind, a, b, out_values, backward):
        ash, bsh = a.values.shape, b.values.shape

        def bw(g):
            ga, gb = backward(g)
            if kind in ("add", "sub", "mul", "div"):
                ga = _unbroadcast(np.asarray(ga), ash)
                gb = _unbroadcast(np.asarray(gb), bsh)
            return ga, gb

        return self.record(kind, out_values, (a, b), bw)

    def ops(self):
        """(kind, out_id, input_ids) triples, in recorded order."""
        return [(kind, out.node_id, tuple(t.node_id for t in inputs))
                for kind, out, inputs, _ in self._ops]

    # ---- backward ----------------------------------------------------------

    def backward(self, loss: Tensor) -> None:
        if loss.tape is not self:
            raise TapeError("loss tensor belongs to a different tape")
        if loss.values.size != 1:
            raise TapeError("backward expects a scalar loss")
        # Per-call gradient buffers keep repeated backward calls additive.
        bufs: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.values)}
        consumed = {}
        for kind, out, inputs, backward in reversed(self._ops):
            g = bufs.pop(out.node_id, None)
            if g is None:
                continue
            consumed[out.node_id] = g
            grads = backward(g)
            for t, gt in zip(inputs, grads):
                if gt is None or not t.requires_grad:
                    continue
                gt = np.asarray(gt, dtype=np.float64).reshape(t.values.shape)
                buf = bufs.get(t.node_id)
                if buf is None:
                    bufs[t.node_id] = gt.copy()
                else:
                    buf += gt
        consumed.update(bufs)
        # Flush: reachable tensors accumulate their buffer, the rest get zeros.
        for t in self._tracked:
            g = consumed.get(t.node_id)
            if g is not None:
                if t.grad is None:
                    t.grad = g.copy()
                else:
                    t.grad += g
            elif t.grad is None:
                t.grad = np.zeros_like(t.values)

    def zero_grad(self) -> None:
        for t in self._tracked:
            t.grad = None


def concat(tensors: list, axis: int = 0) -> Tensor:
    """Concatenate tensors along ``axis``; backward splits the gradient."""
    if not tensors:
        raise TapeError("concat of an empty list")
    tape = tensors[0].tape
    for t in tensors:
        if t.tape is not tape:
            raise TapeError("concat across tapes")
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = np.cumsum([t.values.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, sizes, axis=axis))

    return tape.record("concat", out, tuple(tensors), backward)


def stack_rows(tensors: list) -> Tensor:
    """Stack 1-D tensors into a 2-D tensor, one per row."""
    return concat([t.reshape(1, t.values.shape[0]) for t in tensors], axis=0)


def grad_check(f, point: np.ndarray, epsilon: float = 1e-6) -> float:
    """Compare analytic and central-difference gradients of a scalar function.

    ``f`` maps a Tensor to a scalar Tensor on the same tape.  Returns the
    maximum over coordinates of |analytic - numeric| / max(1, |numeric|).
    """
    point = np.asarray(point, dtype=np.float64)

    tape = Tape()
    x = tape.leaf(point, requires_grad=True)
    out = f(x)
    if not np.all(np.isfinite(out.values)):
        raise GradCheckError("function value is not finite at the probe point")
    tape.backward(out)
    analytic = x.grad.ravel()

    def evaluate(p):
        t = Tape()
        v = f(t.leaf(p))
        val = float(v.values)
        if not np.isfinite(val):
            raise GradCheckError("finite-difference probe produced a non-finite value")
        return val

    flat = point.ravel()
    worst = 0.0
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = epsilon
        hi = evaluate((flat + bump).reshape(point.shape))
        lo = evaluate((flat - bump).reshape(point.shape))
        numeric = (hi - lo) / (2.0 * epsilon)
        err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
