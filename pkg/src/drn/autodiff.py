"""Reverse-mode automatic differentiation on dense float32 tensors.

Everything numeric in this package runs through the primitives here: a
`Tensor` wraps a numpy array, primitive applications are recorded on an
explicit `ComputationTape`, and `backward` replays the tape in reverse to
produce a `GradientMap`. The optimizer (`adam_step`) and the finite-difference
gradient oracle live here too, so the whole numeric substrate is testable in
one place.

Conventions:
  - float32 by default; tests may build float64 tensors for oracle probes.
  - gradients accumulate by summation when a tensor fans out.
  - conv1d is cross-correlation (no kernel flip).
  - any non-finite primitive output raises NonFiniteError immediately.
  - gradient arrays are never mutated in place, and the optimizer replaces
    `.data` wholesale, so views handed out by primitives stay valid.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32

# Flipping this off skips per-op finiteness checks (they are cheap at desk
# scale, so it stays on by default).
CHECK_FINITE = True


class AutodiffError(Exception):
    """Base class for engine failures."""


class ShapeError(AutodiffError):
    """Operand shapes are invalid for the requested primitive."""


class NonFiniteError(AutodiffError):
    """A primitive produced NaN/Inf; the step must abort, not propagate."""


_tensor_ids = itertools.count()


class Tensor:
    """Dense real tensor with row-major data and a unique id.

    Immutable after construction except through optimizer updates, which
    replace `.data` with a fresh array rather than writing through it.
    """

    __slots__ = ("data", "requires_grad", "tid")

    def __init__(self, data, requires_grad: bool = False, dtype=DEFAULT_DTYPE):
        arr = np.asarray(data, dtype=dtype)
        if CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.tid = next(_tensor_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Fast path for primitive outputs: dtype and finiteness already settled.
        t = object.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.tid = next(_tensor_ids)
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

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar ---------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype), dtype=self.data.dtype)

    def __add__(self, other):
        return apply_primitive("add", (self, self._coerce(other)))

    def __radd__(self, other):
        return apply_primitive("add", (self._coerce(other), self))

    def __sub__(self, other):
        return apply_primitive("subtract", (self, self._coerce(other)))

    def __rsub__(self, other):
        return apply_primitive("subtract", (self._coerce(other), self))

    def __mul__(self, other):
        return apply_primitive("multiply", (self, self._coerce(other)))

    def __rmul__(self, other):
        return apply_primitive("multiply", (self._coerce(other), self))

    def __neg__(self):
        return self * (-1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * power(other, -1.0)
        return self * (1.0 / float(other))

    def __pow__(self, exponent):
        return power(self, float(exponent))

    def __matmul__(self, other):
        return apply_primitive("matmul", (self, other))

    def sum(self, axis=None, keepdims: bool = False):
        return apply_primitive("sum", (self,), axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return apply_primitive("mean", (self,), axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return apply_primitive("max", (self,), axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return apply_primitive("reshape", (self,), shape=tuple(shape))

    def slice(self, index):
        return apply_primitive("slice", (self,), index=index)


def constant(data, dtype=DEFAULT_DTYPE) -> Tensor:
    """Non-trainable tensor (targets, masks, geometry)."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=DEFAULT_DTYPE) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(data, requires_grad=True, dtype=dtype)


# -- tape -------------------------------------------------------------------


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    out_tid: int
    backward_fn: object  # grad_out -> tuple of per-input grads (None = no grad)


class ComputationTape:
    """Ordered record of primitive applications, topologically ordered by
    construction (an output is always appended after its inputs exist)."""

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def __enter__(self) -> "ComputationTape":
        _push_tape(self)
        return self

    def __exit__(self, *exc):
        _pop_tape(self)
        return False


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _push_tape(tape: ComputationTape) -> None:
    _tape_stack().append(tape)


def _pop_tape(tape: ComputationTape) -> None:
    stack = _tape_stack()
    if not stack or stack[-1] is not tape:
        raise AutodiffError("tape context exited out of order")
    stack.pop()


def active_tape() -> ComputationTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


# -- primitive registry -----------------------------------------------------

# name -> fn(*input_arrays, **attrs) -> (out_array, backward_fn)
PRIMITIVES: dict[str, object] = {}


def primitive(name: str):
    def register(fn):
        PRIMITIVES[name] = fn
        return fn

    return register


def apply_primitive(op: str, inputs: tuple[Tensor, ...], **attrs) -> Tensor:
    """Run one primitive, record it on the active tape if any input needs grad."""
    fn = PRIMITIVES.get(op)
    if fn is None:
        raise AutodiffError(f"unknown primitive {op!r}")
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        out_data, backward_fn = fn(*(t.data for t in inputs), **attrs)
    out_data = np.asarray(out_data)
    if CHECK_FINITE and not np.all(np.isfinite(out_data)):
        stats = ", ".join(
            f"in{i}(shape={t.data.shape}, min={t.data.min():.3g}, max={t.data.max():.3g})"
            for i, t in enumerate(inputs)
        )
        raise NonFiniteError(f"primitive {op!r} produced non-finite output; {stats}")
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires_grad)
    if requires_grad:
        tape = active_tape()
        if tape is not None:
            tape.entries.append(TapeEntry(op, inputs, out.tid, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape of a broadcast operand."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic --


@primitive("add")
def _add(a, b):
    out = a + b

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return out, backward


@primitive("subtract")
def _subtract(a, b):
    out = a - b

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return out, backward


@primitive("multiply")
def _multiply(a, b):
    out = a * b

    def backward(g):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return out, backward


@primitive("matmul")
def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a, b)
    except ValueError as exc:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, b.swapaxes(-1, -2))
        if ga.shape != a.shape:
            ga = _unbroadcast(ga, a.shape)
        if b.ndim == 2 and a.ndim > 2:
            # batched activations against a shared weight: contract all leading
            # axes in one GEMM instead of batching then summing
            k = a.shape[-1]
            n = g.shape[-1]
            gb = np.tensordot(a.reshape(-1, k), g.reshape(-1, n), axes=((0,), (0,)))
        else:
            gb = _unbroadcast(np.matmul(a.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return out, backward


@primitive("power")
def _power(a, *, exponent: float):
    out = a**exponent

    def backward(g):
        return (g * exponent * a ** (exponent - 1.0),)

    return out, backward


# -- nonlinearities --


@primitive("relu")
def _relu(a):
    out = np.maximum(a, 0.0)

    def backward(g):
        return (g * (a > 0),)

    return out, backward


@primitive("sigmoid")
def _sigmoid(a):
    # Split by sign to avoid exp overflow on large |a|.
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)

    def backward(g):
        return (g * out * (1.0 - out),)

    return out, backward


@primitive("tanh")
def _tanh(a):
    out = np.tanh(a)

    def backward(g):
        return (g * (1.0 - out * out),)

    return out, backward


@primitive("exp")
def _exp(a):
    out = np.exp(a)

    def backward(g):
        return (g * out,)

    return out, backward


@primitive("log")
def _log(a):
    out = np.log(a)

    def backward(g):
        return (g / a,)

    return out, backward


@primitive("sqrt")
def _sqrt(a):
    out = np.sqrt(a)

    def backward(g):
        return (g * 0.5 / out,)

    return out, backward


@primitive("softmax")
def _softmax(a, *, axis: int):
    shifted = a - a.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return out, backward


# -- shape ops --


@primitive("reshape")
def _reshape(a, *, shape):
    out = a.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return out, backward


@primitive("broadcast")
def _broadcast(a, *, shape):
    out = np.broadcast_to(a, shape)

    def backward(g):
        return (_unbroadcast(g, a.shape),)

    return out, backward


@primitive("slice")
def _slice(a, *, index):
    out = a[index].copy()

    def backward(g):
        ga = np.zeros_like(a)
        ga[index] = g
        return (ga,)

    return out, backward


@primitive("concat")
def _concat(*arrays, axis: int):
    out = np.concatenate(arrays, axis=axis)
    sizes = [arr.shape[axis] for arr in arrays]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        pieces = []
        for i in range(len(arrays)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return out, backward


# -- reductions --


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(g, shape, axes):
    full = list(g.shape)
    for a in sorted(axes):
        full.insert(a, 1)
    return np.broadcast_to(g.reshape(full), shape)


@primitive("sum")
def _sum(a, *, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    out = a.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if keepdims:
            return (np.broadcast_to(g, a.shape),)
        return (_expand_reduced(g, a.shape, axes),)

    return out, backward


@primitive("mean")
def _mean(a, *, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        expanded = np.broadcast_to(g, a.shape) if keepdims else _expand_reduced(g, a.shape, axes)
        return (expanded / count,)

    return out, backward


@primitive("max")
def _max(a, *, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    out = a.max(axis=axes, keepdims=keepdims)
    full = out if keepdims else a.max(axis=axes, keepdims=True)
    mask = a == full
    counts = mask.sum(axis=axes, keepdims=True)

    def backward(g):
        expanded = np.broadcast_to(g, a.shape) if keepdims else _expand_reduced(g, a.shape, axes)
        # Ties share the gradient equally; deterministic and symmetric.
        return (expanded * mask / counts,)

    return out, backward


# -- convolution --


@primitive("conv1d")
def _conv1d(x, w, b, *, stride: int, pad_left: int, pad_right: int):
    """Cross-correlation over the middle (time) axis.

    x: (B, T, Cin), w: (k, Cin, Cout), b: (Cout,). Output (B, T', Cout) with
    T' = (T + pad_left + pad_right - k) // stride + 1.
    """
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d expects x (B,T,C) and w (k,Cin,Cout), got {x.shape}, {w.shape}")
    bsz, t, cin = x.shape
    k, cin_w, cout = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv1d channel mismatch: input {cin}, kernel {cin_w}")
    xp = np.pad(x, ((0, 0), (pad_left, pad_right), (0, 0)))
    t_out = (t + pad_left + pad_right - k) // stride + 1
    if t_out < 1:
        raise ShapeError(f"conv1d output length {t_out} < 1 for T={t}, k={k}, stride={stride}")
    span = (t_out - 1) * stride + 1
    out = np.matmul(xp[:, 0:span:stride, :], w[0])
    for kk in range(1, k):
        out += np.matmul(xp[:, kk : kk + span : stride, :], w[kk])
    out += b

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w)
        for kk in range(k):
            tap = slice(kk, kk + span, stride)
            gxp[:, tap, :] += np.matmul(g, w[kk].swapaxes(-1, -2))
            gw[kk] = np.tensordot(xp[:, tap, :], g, axes=((0, 1), (0, 1)))
        gx = gxp[:, pad_left : pad_left + t, :]
        gb = g.sum(axis=(0, 1))
        return gx, gw, gb

    return out, backward


# -- functional wrappers ------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    return apply_primitive("relu", (x,))


def sigmoid(x: Tensor) -> Tensor:
    return apply_primitive("sigmoid", (x,))


def tanh(x: Tensor) -> Tensor:
    return apply_primitive("tanh", (x,))


def exp(x: Tensor) -> Tensor:
    return apply_primitive("exp", (x,))


def log(x: Tensor) -> Tensor:
    return apply_primitive("log", (x,))


def sqrt(x: Tensor) -> Tensor:
    return apply_primitive("sqrt", (x,))


def power(x: Tensor, exponent: float) -> Tensor:
    return apply_primitive("power", (x,), exponent=exponent)


def softmax(x: Tensor, axis: int) -> Tensor:
    return apply_primitive("softmax", (x,), axis=axis)


def concat(tensors, axis: int) -> Tensor:
    return apply_primitive("concat", tuple(tensors), axis=axis)


def broadcast(x: Tensor, shape) -> Tensor:
    return apply_primitive("broadcast", (x,), shape=tuple(shape))


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int, pad_left: int, pad_right: int) -> Tensor:
    return apply_primitive("conv1d", (x, w, b), stride=stride, pad_left=pad_left, pad_right=pad_right)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min composed from primitives: a - relu(a - b)."""
    return a - relu(a - b)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    return a + relu(b - a)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    return x + relu(lo - x)


def clamp_max(x: Tensor, hi: float) -> Tensor:
    return x - relu(x - hi)


def absolute(x: Tensor) -> Tensor:
    return relu(x) + relu(-x)


# -- backward pass ------------------------------------------------------------


class GradientMap:
    """tensor id -> gradient Tensor, covering every requires-grad leaf of a tape."""

    def __init__(self, grads: dict[int, Tensor]):
        self._grads = grads

    @staticmethod
    def _key(t) -> int:
        return t.tid if isinstance(t, Tensor) else int(t)

    def __getitem__(self, t) -> Tensor:
        return self._grads[self._key(t)]

    def get(self, t, default=None):
        return self._grads.get(self._key(t), default)

    def __contains__(self, t) -> bool:
        return self._key(t) in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    def items(self):
        return self._grads.items()


def backward(loss: Tensor, tape: ComputationTape) -> GradientMap:
    """Reverse-replay the tape from `loss`, returning gradients for every
    requires-grad leaf referenced by the tape (zeros if off the loss path)."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    produced = {e.out_tid for e in tape.entries}
    if loss.tid not in produced:
        raise AutodiffError("loss was not produced on this tape (dangling tape reference)")

    grads: dict[int, np.ndarray] = {loss.tid: np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g = grads.pop(entry.out_tid, None)
        if g is None:
            continue
        in_grads = entry.backward_fn(g)
        for t, gi in zip(entry.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.data.shape:
                raise ShapeError(
                    f"backward of {entry.op!r} returned grad shape {gi.shape} "
                    f"for input shape {t.data.shape}"
                )
            cur = grads.get(t.tid)
            grads[t.tid] = gi if cur is None else cur + gi

    leaf_grads: dict[int, Tensor] = {}
    for entry in tape.entries:
        for t in entry.inputs:
            if t.requires_grad and t.tid not in produced and t.tid not in leaf_grads:
                g = grads.get(t.tid)
                if g is None:
                    g = np.zeros_like(t.data)
                leaf_grads[t.tid] = Tensor._wrap(np.asarray(g, dtype=t.data.dtype), False)
    return GradientMap(leaf_grads)


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], lr: float, **kw) -> "AdamState":
        if lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {lr}")
        state = cls(lr=lr, **kw)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(
    params: dict[str, Tensor],
    grads: GradientMap,
    state: AdamState,
    update: set[str] | None = None,
) -> None:
    """Standard Adam with bias correction. `update`, when given, limits which
    parameters move; their moments still exist but stay untouched."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        if update is not None and name not in update:
            continue
        g_tensor = grads.get(p)
        if g_tensor is None:
            raise AutodiffError(f"missing gradient for parameter {name!r}")
        g = np.asarray(g_tensor.data, dtype=p.data.dtype)
        m = state.m[name]
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / bc1
        v_hat = v / bc2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_gradients(grads: GradientMap, params: dict[str, Tensor], max_norm: float) -> GradientMap:
    """Rescale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        g = grads.get(p)
        if g is not None:
            total += float(np.sum(g.data.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    scaled = {tid: Tensor._wrap(g.data * np.asarray(scale, dtype=g.data.dtype), False) for tid, g in grads.items()}
    return GradientMap(scaled)


# -- finite-difference oracle ---------------------------------------------------


def finite_difference_check(f, x: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between the analytic gradient of f at x and central
    finite differences: max_i |a_i - n_i| / max(1e-8, |n_i|).

    f maps a Tensor to a scalar Tensor and must be evaluable at x +- eps per
    coordinate. The probes reuse x's dtype, so float64 inputs give a tighter
    oracle than the engine's float32 default.
    """
    x_probe = Tensor(x.data.copy(), requires_grad=True, dtype=x.data.dtype)
    with ComputationTape() as tape:
        out = f(x_probe)
    if out.data.size != 1:
        raise ShapeError("finite_difference_check needs a scalar-valued f")
    analytic = backward(out, tape)[x_probe].data.reshape(-1)

    flat = x.data.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        f_plus = f(Tensor(bumped.reshape(x.data.shape), dtype=x.data.dtype)).data
        bumped[i] = flat[i] - eps
        f_minus = f(Tensor(bumped.reshape(x.data.shape), dtype=x.data.dtype)).data
        if not (np.isfinite(f_plus).all() and np.isfinite(f_minus).all()):
            raise NonFiniteError("f is non-finite at a finite-difference probe point")
        numeric[i] = (float(f_plus) - float(f_minus)) / (2.0 * eps)

    denom = np.maximum(1e-8, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
