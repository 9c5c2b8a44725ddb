"""Dense float64 tensors with a reverse-mode autodiff tape.

Every operation here is a registered primitive: it computes its forward
value with numpy and, when a Tape is active and an input requires
gradients, appends a record holding the backward rule. Gradients are
accumulated in the tape, not on the tensors, so tensors stay immutable
and a single value can participate in many disjoint tapes.

Broadcasting follows numpy's trailing-dimension alignment and nothing
else. Non-finite values are rejected eagerly: constructing a tensor from
NaN/Inf data or producing NaN/Inf from a primitive raises NumericError.
"""

import threading

import numpy as np

from ..errors import DimensionError, NumericError, StateError

_TAPES = threading.local()

# Test hook for gradcheck negative controls: when set, silu's backward
# rule is deliberately wrong. See `corrupted_silu_grad`.
_SILU_GRAD_BROKEN = False


def _tape_stack() -> list:
    stack = getattr(_TAPES, "stack", None)
    if stack is None:
        stack = []
        _TAPES.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced a non-finite value")


class Tensor:
    """Immutable float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor data contains NaN/Inf")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "requires_grad", bool(requires_grad))

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        """Wrap an op result without copying. `arr` must not be mutated later."""
        out = object.__new__(cls)
        if arr.flags.writeable:
            arr.flags.writeable = False
        object.__setattr__(out, "data", arr)
        object.__setattr__(out, "requires_grad", requires_grad)
        return out

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class _Record:
    """One recorded primitive: inputs, output, and the backward rule."""

    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Single-owner recording of primitive ops, in execution order.

    Use as a context manager around the traced computation, then call
    `backward(scalar_output)` once. Gradients live in the tape and are
    read back with `grad(tensor)`. A second backward without a fresh
    tape raises StateError.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._grads: dict[int, np.ndarray] = {}
        self._used = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def _record(self, inputs, output, backward_fn):
        self._records.append(_Record(inputs, output, backward_fn))

    def __len__(self):
        return len(self._records)

    def backward(self, output: Tensor) -> None:
        """Accumulate gradients of a scalar output w.r.t. every tracked input."""
        if self._used:
            raise StateError("tape backward called twice; build a new tape")
        self._used = True
        if output.size != 1:
            raise DimensionError("backward requires a scalar output")
        self._grads[id(output)] = np.ones_like(output.data)
        for rec in reversed(self._records):
            out_grad = self._grads.get(id(rec.output))
            if out_grad is None:
                continue
            in_grads = rec.backward_fn(out_grad)
            for tensor, grad in zip(rec.inputs, in_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                slot = self._grads.get(id(tensor))
                self._grads[id(tensor)] = grad if slot is None else slot + grad
        for rec in self._records:
            for tensor in rec.inputs:
                g = self._grads.get(id(tensor))
                if g is not None and not np.all(np.isfinite(g)):
                    raise NumericError("backward produced a non-finite gradient")

    def grad(self, tensor: Tensor):
        """Gradient accumulated for `tensor`, or None if it never got one."""
        return self._grads.get(id(tensor))


def _maybe_record(inputs: tuple, out_data: np.ndarray, backward_fn) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, track)
    if track:
        tape._record(inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing trailing-dimension broadcast."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast numpy-style."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul requires tensors with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data
    _check_finite(out_data, "matmul")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _maybe_record((a, b), out_data, backward)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out_data = a.data + b.data
    except ValueError as err:
        raise DimensionError(f"add: {a.shape} vs {b.shape}") from err
    _check_finite(out_data, "add")

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _maybe_record((a, b), out_data, backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out_data = a.data * b.data
    except ValueError as err:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}") from err
    _check_finite(out_data, "mul")

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _maybe_record((a, b), out_data, backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _maybe_record((a,), -a.data, lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)
    _check_finite(out_data, "exp")
    return _maybe_record((a,), out_data, lambda g: (g * out_data,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)
    return _maybe_record((a,), out_data, lambda g: (g * (1.0 - out_data * out_data),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed in overflow-safe form."""
    a = _as_tensor(a)
    out_data = np.log1p(np.exp(-np.abs(a.data))) + np.maximum(a.data, 0.0)
    return _maybe_record((a,), out_data, lambda g: (g * _sigmoid(a.data),))


def silu(a) -> Tensor:
    """x * sigmoid(x)."""
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    out_data = a.data * s

    def backward(g):
        if _SILU_GRAD_BROKEN:
            return (g * s,)  # drops the x*s*(1-s) term on purpose
        return (g * (s + a.data * s * (1.0 - s)),)

    return _maybe_record((a,), out_data, backward)


def rmsnorm(x, gain, eps: float = 1e-8) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain along the last axis."""
    x, gain = _as_tensor(x), _as_tensor(gain)
    if eps <= 0:
        raise NumericError("rmsnorm eps must be > 0")
    if gain.shape != x.shape[-1:]:
        raise DimensionError(f"rmsnorm gain shape {gain.shape} vs x {x.shape}")
    n = x.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    normed = x.data * inv
    out_data = normed * gain.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gg = g * gain.data
            dot = np.sum(gg * x.data, axis=-1, keepdims=True)
            gx = inv * (gg - x.data * (dot * inv * inv / n))
        ggain = np.sum(g * normed, axis=tuple(range(x.ndim - 1))) if gain.requires_grad else None
        return gx, ggain

    return _maybe_record((x, gain), out_data, backward)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    _check_finite(out_data, "sum")

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _maybe_record((a,), out_data, backward)


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    return mul(tensor_sum(a), 1.0 / a.size)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out_data = a.data.reshape(shape)
    return _maybe_record((a,), out_data, lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _maybe_record((a,), a.data.transpose(axes), lambda g: (g.transpose(inv),))


def take_index(a, axis: int, index: int) -> Tensor:
    """Slice out one index along an axis, dropping that axis."""
    a = _as_tensor(a)
    out_data = np.take(a.data, index, axis=axis)

    def backward(g):
        full = np.zeros(a.shape)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _maybe_record((a,), out_data, backward)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def backward(g):
        full = np.zeros(a.shape)
        full[sl] = g
        return (full,)

    return _maybe_record((a,), a.data[sl], backward)


def unstack(a, axis: int) -> list[Tensor]:
    a = _as_tensor(a)
    return [take_index(a, axis, i) for i in range(a.shape[axis])]


def stack(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        return tuple(parts[i] if t.requires_grad else None for i, t in enumerate(tensors))

    return _maybe_record(tuple(tensors), out_data, backward)


def conv1d_causal(x, w, bias=None) -> Tensor:
    """Depthwise causal conv along the middle axis of x: [D, L, E] with w [E, k].

    Step l sees inputs l-k+1..l (zero padding on the left); tap j of w
    weighs the input j-(k-1) steps in the past, so w[:, k-1] multiplies
    the current step.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 3 or w.ndim != 2 or x.shape[2] != w.shape[0]:
        raise DimensionError(f"conv1d_causal shapes: x {x.shape}, w {w.shape}")
    length, k = x.shape[1], w.shape[1]
    out_data = np.zeros(x.shape)
    for j in range(k):
        shift = k - 1 - j  # how far in the past tap j reaches
        if shift >= length:
            continue
        out_data[:, shift:, :] += x.data[:, : length - shift, :] * w.data[:, j]
    inputs = (x, w)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (x.shape[2],):
            raise DimensionError(f"conv1d_causal bias shape {bias.shape}")
        out_data += bias.data
        inputs = (x, w, bias)
    _check_finite(out_data, "conv1d_causal")

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.zeros(x.shape)
            for j in range(k):
                shift = k - 1 - j
                if shift >= length:
                    continue
                gx[:, : length - shift, :] += g[:, shift:, :] * w.data[:, j]
        if w.requires_grad:
            gw = np.zeros(w.shape)
            for j in range(k):
                shift = k - 1 - j
                if shift >= length:
                    continue
                gw[:, j] = np.sum(g[:, shift:, :] * x.data[:, : length - shift, :], axis=(0, 1))
        grads = [gx, gw]
        if bias is not None:
            gb = np.sum(g, axis=(0, 1)) if bias.requires_grad else None
            grads.append(gb)
        return tuple(grads)

    return _maybe_record(inputs, out_data, backward)


def cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer labels under max-shifted softmax.

    logits: [B, C]; labels: int array [B]. Returns a scalar tensor.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B, C] logits, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"labels shape {labels.shape} vs logits {logits.shape}")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    probs = ez / ez.sum(axis=1, keepdims=True)
    batch = z.shape[0]
    logp = (z - m)[np.arange(batch), labels] - np.log(ez.sum(axis=1))
    out_data = np.asarray(-np.mean(logp))
    _check_finite(out_data, "cross_entropy")

    def backward(g):
        gl = probs.copy()
        gl[np.arange(batch), labels] -= 1.0
        return (gl * (g / batch),)

    return _maybe_record((logits,), out_data, backward)


class corrupted_silu_grad:
    """Context manager installing a wrong silu derivative (negative-control hook)."""

    def __enter__(self):
        global _SILU_GRAD_BROKEN
        _SILU_GRAD_BROKEN = True
        return self

    def __exit__(self, exc_type, exc, tb):
        global _SILU_GRAD_BROKEN
        _SILU_GRAD_BROKEN = False
        return False
