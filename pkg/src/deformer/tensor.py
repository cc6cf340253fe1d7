"""Dense tensors with tape-based reverse-mode differentiation.

Only the primitives the encoder needs are provided. Every primitive knows
its forward (pure numpy), its vector-Jacobian product and its FLOP cost, so
the same code path serves inference, training, gradient checking and the
instrumented FLOP counter.

Operations record onto the innermost active :class:`Tape`; with no tape
active they simply compute, which is the inference fast path.
"""
from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


class ParameterError(ValueError):
    pass


# GELU, tanh form: 0.5 x (1 + tanh(GELU_C (x + GELU_A x^3)))
GELU_C = math.sqrt(2.0 / math.pi)  # 0.7978845608028654
GELU_A = 0.044715

# FLOPs charged per output element for the non-matmul primitives.
# A multiply-accumulate inside matmul counts as 2.
SOFTMAX_FLOPS = 5
LAYERNORM_FLOPS = 8
GELU_FLOPS = 8
XLOGY_FLOPS = 2

_ids = itertools.count()
_state = threading.local()


def _tapes() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def _counters() -> list:
    if not hasattr(_state, "counters"):
        _state.counters = []
    return _state.counters


class Tensor:
    """Immutable n-d array of reals. float64 by default, float32 on request."""

    __slots__ = ("data", "id")

    def __init__(self, data, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype if dtype is not None else _default_dtype(data))
        arr.flags.writeable = False
        self.data = arr
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # no copy: ``arr`` is a fresh primitive output owned by the new tensor
        t = cls.__new__(cls)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        t.id = next(_ids)
        return t

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _default_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return np.float64


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# Tape


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    output: int
    attrs: dict
    saved: tuple[np.ndarray, ...]
    out_value: np.ndarray


@dataclass
class Tape:
    """Ordered record of primitive applications.

    ``leaves`` holds the values of every input that was not produced on this
    tape, so the whole computation can be replayed.
    """

    nodes: list[Node] = field(default_factory=list)
    leaves: dict[int, np.ndarray] = field(default_factory=dict)
    _produced: dict[int, int] = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes().pop()

    @property
    def output(self) -> int:
        if not self.nodes:
            raise ShapeError("tape is empty")
        return self.nodes[-1].output

    def record(self, op: str, inputs: Sequence[Tensor], out: Tensor, attrs: dict, saved):
        for t in inputs:
            if t.id not in self._produced and t.id not in self.leaves:
                self.leaves[t.id] = t.data
        self._produced[out.id] = len(self.nodes)
        self.nodes.append(Node(op, tuple(t.id for t in inputs), out.id, attrs, saved, out.data))

    def replay(self) -> dict[int, np.ndarray]:
        """Recompute every node from the recorded leaves; returns id -> value."""
        values = dict(self.leaves)
        for node in self.nodes:
            fwd = PRIMITIVES[node.op].forward
            out, _ = fwd(*(values[i] for i in node.inputs), **node.attrs)
            values[node.output] = out
        return values


@contextmanager
def no_tape():
    """Temporarily suspend recording (e.g. for a frozen teacher)."""
    saved = list(_tapes())
    _tapes().clear()
    try:
        yield
    finally:
        _tapes().extend(saved)


# ---------------------------------------------------------------------------
# FLOP counting


@dataclass
class FlopCounter:
    total: int = 0
    by_op: dict[str, int] = field(default_factory=dict)

    def add(self, op: str, n: int) -> None:
        self.total += n
        self.by_op[op] = self.by_op.get(op, 0) + n


@contextmanager
def count_flops():
    counter = FlopCounter()
    _counters().append(counter)
    try:
        yield counter
    finally:
        _counters().remove(counter)


# ---------------------------------------------------------------------------
# Primitive registry


@dataclass(frozen=True)
class Primitive:
    forward: Callable[..., tuple[np.ndarray, tuple]]
    vjp: Callable[..., tuple]
    flops: Callable[..., int]


PRIMITIVES: dict[str, Primitive] = {}


def _apply(op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    prim = PRIMITIVES[op]
    out_arr, saved = prim.forward(*(t.data for t in inputs), **attrs)
    out = Tensor._wrap(np.asarray(out_arr))
    counters = _counters()
    if counters:
        n = prim.flops(*(t.data for t in inputs), out=out_arr, **attrs)
        for c in counters:
            c.add(op, n)
    tapes = _tapes()
    if tapes:
        tapes[-1].record(op, inputs, out, attrs, saved)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _elementwise_out(*arrays, out, **_):
    return int(out.size)


def _zero_flops(*arrays, out, **_):
    return 0


def _pair(a, b):
    a = as_tensor(a, dtype=b.dtype if isinstance(b, Tensor) else None)
    b = as_tensor(b, dtype=a.dtype)
    return a, b


# elementwise arithmetic ----------------------------------------------------

def _add_fwd(a, b):
    return a + b, ()


def _add_vjp(g, a, b, out, saved):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_fwd(a, b):
    return a - b, ()


def _sub_vjp(g, a, b, out, saved):
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def _mul_fwd(a, b):
    return a * b, ()


def _mul_vjp(g, a, b, out, saved):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _div_fwd(a, b):
    return a / b, ()


def _div_vjp(g, a, b, out, saved):
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def _neg_fwd(a):
    return -a, ()


def _neg_vjp(g, a, out, saved):
    return (-g,)


PRIMITIVES["add"] = Primitive(_add_fwd, _add_vjp, _elementwise_out)
PRIMITIVES["sub"] = Primitive(_sub_fwd, _sub_vjp, _elementwise_out)
PRIMITIVES["mul"] = Primitive(_mul_fwd, _mul_vjp, _elementwise_out)
PRIMITIVES["div"] = Primitive(_div_fwd, _div_vjp, _elementwise_out)
PRIMITIVES["neg"] = Primitive(_neg_fwd, _neg_vjp, _zero_flops)


def add(a, b) -> Tensor:
    return _apply("add", _pair(a, b))


def sub(a, b) -> Tensor:
    return _apply("sub", _pair(a, b))


def mul(a, b) -> Tensor:
    return _apply("mul", _pair(a, b))


def div(a, b) -> Tensor:
    return _apply("div", _pair(a, b))


def neg(a) -> Tensor:
    return _apply("neg", (as_tensor(a),))


# matmul ---------------------------------------------------------------------

def _matmul_fwd(a, b):
    return np.matmul(a, b), ()


def _matmul_vjp(g, a, b, out, saved):
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    if b.ndim == 2 and a.ndim > 2:
        # shared weight: fold the batch axes into one GEMM
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
    return _unbroadcast(ga, a.shape), gb


def _matmul_flops(a, b, out):
    return 2 * int(out.size) * int(a.shape[-1])


PRIMITIVES["matmul"] = Primitive(_matmul_fwd, _matmul_vjp, _matmul_flops)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} x {b.shape}") from e
    return _apply("matmul", (a, b))


# shape manipulation ----------------------------------------------------------

def _reshape_fwd(a, shape):
    return a.reshape(shape), ()


def _reshape_vjp(g, a, out, saved, shape):
    return (g.reshape(a.shape),)


def _transpose_fwd(a, axes):
    return np.transpose(a, axes), ()


def _transpose_vjp(g, a, out, saved, axes):
    return (np.transpose(g, np.argsort(axes)),)


def _concat_fwd(*arrays, axis):
    return np.concatenate(arrays, axis=axis), ()


def _concat_vjp(g, *arrays, out, saved, axis):
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _index_fwd(a, index):
    return a[index], ()


def _index_vjp(g, a, out, saved, index):
    grad = np.zeros_like(a)
    np.add.at(grad, index, g)
    return (grad,)


PRIMITIVES["reshape"] = Primitive(_reshape_fwd, _reshape_vjp, _zero_flops)
PRIMITIVES["transpose"] = Primitive(_transpose_fwd, _transpose_vjp, _zero_flops)
PRIMITIVES["concat"] = Primitive(_concat_fwd, _concat_vjp, _zero_flops)
PRIMITIVES["index"] = Primitive(_index_fwd, _index_vjp, _zero_flops)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    return _apply("reshape", (a,), shape=shape)


def transpose(a: Tensor, axes) -> Tensor:
    return _apply("transpose", (a,), axes=tuple(axes))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return _apply("concat", tensors, axis=axis)


def index(a: Tensor, idx) -> Tensor:
    """Numpy-style gather; duplicate indices accumulate in the backward pass."""
    return _apply("index", (a,), index=idx)


# reductions and selection ----------------------------------------------------

def _sum_fwd(a, axis, keepdims):
    return np.sum(a, axis=axis, keepdims=keepdims), ()


def _sum_vjp(g, a, out, saved, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def _sum_flops(a, out, **_):
    return int(a.size)


def _where_fwd(cond, a, fill):
    return np.where(cond, a, fill), ()


def _where_vjp(g, cond, a, out, saved, fill):
    return None, _unbroadcast(np.where(cond, g, 0.0), a.shape)


PRIMITIVES["sum"] = Primitive(_sum_fwd, _sum_vjp, _sum_flops)
PRIMITIVES["where"] = Primitive(_where_fwd, _where_vjp, _zero_flops)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    if isinstance(axis, list):
        axis = tuple(axis)
    return _apply("sum", (a,), axis=axis, keepdims=keepdims)


def where(cond, a: Tensor, fill: float) -> Tensor:
    """Select ``a`` where ``cond`` holds, the constant ``fill`` elsewhere."""
    cond = Tensor(np.asarray(cond, dtype=bool), dtype=bool)
    return _apply("where", (cond, a), fill=fill)


# nonlinearities --------------------------------------------------------------

def _softmax_fwd(x, axis):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    return y, ()


def _softmax_vjp(g, x, out, saved, axis):
    y = out
    return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)


def _softmax_flops(x, out, **_):
    return SOFTMAX_FLOPS * int(out.size)


def _layer_norm_fwd(x, gain, bias, eps):
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def _layer_norm_vjp(g, x, gain, bias, out, saved, eps):
    xhat, inv = saved
    d = x.shape[-1]
    ggain = _unbroadcast(g * xhat, gain.shape)
    gbias = _unbroadcast(g, bias.shape)
    gx_hat = g * gain
    gx = inv * (gx_hat - np.mean(gx_hat, axis=-1, keepdims=True)
                - xhat * np.sum(gx_hat * xhat, axis=-1, keepdims=True) / d)
    return gx, ggain, gbias


def _layer_norm_flops(x, gain, bias, out, eps):
    return LAYERNORM_FLOPS * int(out.size)


def _gelu_fwd(x):
    inner = GELU_C * (x + GELU_A * (x * x * x))
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), (t,)


def _gelu_vjp(g, x, out, saved):
    (t,) = saved
    dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)


def _gelu_flops(x, out):
    return GELU_FLOPS * int(out.size)


def _log_fwd(x):
    return np.log(x), ()


def _log_vjp(g, x, out, saved):
    return (g / x,)


def _xlogy_fwd(x, y):
    safe = np.where(x == 0, 1.0, y)
    return np.where(x == 0, 0.0, x * np.log(safe)).astype(x.dtype), ()


def _xlogy_vjp(g, x, y, out, saved):
    zero = x == 0
    safe = np.where(zero, 1.0, y)
    gx = np.where(zero, 0.0, g * np.log(safe))
    gy = np.where(zero, 0.0, g * x / safe)
    return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)


def _xlogy_flops(x, y, out):
    return XLOGY_FLOPS * int(out.size)


def _maximum_fwd(x, floor):
    return np.maximum(x, floor).astype(x.dtype), ()


def _maximum_vjp(g, x, out, saved, floor):
    return (np.where(x >= floor, g, 0.0),)


PRIMITIVES["softmax"] = Primitive(_softmax_fwd, _softmax_vjp, _softmax_flops)
PRIMITIVES["layer_norm"] = Primitive(_layer_norm_fwd, _layer_norm_vjp, _layer_norm_flops)
PRIMITIVES["gelu"] = Primitive(_gelu_fwd, _gelu_vjp, _gelu_flops)
PRIMITIVES["log"] = Primitive(_log_fwd, _log_vjp, _elementwise_out)
PRIMITIVES["xlogy"] = Primitive(_xlogy_fwd, _xlogy_vjp, _xlogy_flops)
PRIMITIVES["maximum"] = Primitive(_maximum_fwd, _maximum_vjp, _elementwise_out)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax. Entries equal to -inf get exactly zero mass."""
    x = as_tensor(x)
    if x.ndim == 0:
        raise ShapeError("softmax of a scalar")
    if x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    return _apply("softmax", (x,), axis=axis)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    if not eps > 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"gain/bias must have length {x.shape[-1]}")
    return _apply("layer_norm", (x, gain, bias), eps=float(eps))


def gelu(x: Tensor) -> Tensor:
    return _apply("gelu", (as_tensor(x),))


def log(x: Tensor) -> Tensor:
    return _apply("log", (as_tensor(x),))


def xlogy(x: Tensor, y: Tensor) -> Tensor:
    """x * ln(y), defined as 0 (with zero gradient) wherever x == 0."""
    return _apply("xlogy", _pair(x, y))


def maximum(x: Tensor, floor: float) -> Tensor:
    return _apply("maximum", (as_tensor(x),), floor=floor)


# ---------------------------------------------------------------------------
# Reverse pass


def backward(tape: Tape, seed=None, wrt: Sequence[Tensor] | None = None,
             output: Tensor | None = None) -> list[np.ndarray] | dict[int, np.ndarray]:
    """Propagate ``seed`` from the tape output back to its leaves.

    With ``wrt`` given, returns one gradient per tensor in the same order;
    tensors the output does not depend on get zeros. Otherwise returns a
    dict of leaf id -> gradient.
    """
    if output is not None:
        out_id = output.id
        if out_id not in tape._produced:
            raise ShapeError("output was not produced on this tape")
        out_shape = output.shape
        out_dtype = output.dtype
    else:
        out_id = tape.output
        last = tape.nodes[-1]
        out_shape = last.out_value.shape
        out_dtype = last.out_value.dtype
    seed_arr = np.ones(out_shape, dtype=out_dtype) if seed is None else np.asarray(
        seed.data if isinstance(seed, Tensor) else seed, dtype=out_dtype)
    if seed_arr.shape != out_shape:
        raise ShapeError(f"seed shape {seed_arr.shape} does not match output {out_shape}")

    values: dict[int, np.ndarray] = dict(tape.leaves)
    for node in tape.nodes:
        values[node.output] = node.out_value

    grads: dict[int, np.ndarray] = {out_id: seed_arr}
    stop = tape._produced[out_id]
    for node in reversed(tape.nodes[: stop + 1]):
        g = grads.pop(node.output, None) if node.output != out_id else grads[out_id]
        if g is None:
            continue
        ins = [values[i] for i in node.inputs]
        in_grads = PRIMITIVES[node.op].vjp(g, *ins, out=node.out_value, saved=node.saved,
                                           **node.attrs)
        for i, gi in zip(node.inputs, in_grads):
            if gi is None:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    leaf_grads = {i: g for i, g in grads.items() if i in tape.leaves}
    if wrt is None:
        return leaf_grads
    return [leaf_grads.get(t.id, np.zeros(t.shape, dtype=t.dtype)) for t in wrt]


def value_and_grad(fn: Callable[..., Tensor], params: Sequence[Tensor]):
    """Evaluate ``fn(*params)`` on a fresh tape and return (value, grads)."""
    with Tape() as tape:
        out = fn(*params)
    grads = backward(tape, output=out, wrt=params)
    return out, grads


# ---------------------------------------------------------------------------
# Finite-difference gradient checking

SAMPLE_THRESHOLD = 10_000
SAMPLE_SIZE = 256


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    eps: float
    threshold: float
    sampled: dict[str, list[int] | None]
    passed: bool

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def grad_check(loss_fn: Callable[..., Tensor], params: dict[str, Tensor] | Sequence[Tensor],
               eps: float = 1e-6, threshold: float = 1e-5, seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of a scalar loss with central differences.

    Tensors larger than 10,000 elements are checked on 256 coordinates drawn
    uniformly with ``seed``; the drawn flat indices are kept in the report.
    """
    if not eps > 0:
        raise ParameterError("eps must be positive")
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    names = list(params)
    tensors = [params[n] for n in names]
    for t in tensors:
        if t.dtype != np.float64:
            raise ParameterError("grad_check requires float64 parameters")

    _, analytic = value_and_grad(loss_fn, tensors)
    rng = np.random.default_rng(seed)

    def evaluate(vals):
        with no_tape():
            v = loss_fn(*vals).item()
        if not np.isfinite(v):
            raise NumericalError("loss is not finite at a perturbed point")
        return v

    errors: dict[str, float] = {}
    sampled: dict[str, list[int] | None] = {}
    for k, name in enumerate(names):
        base = tensors[k].data
        if base.size > SAMPLE_THRESHOLD:
            coords = sorted(rng.choice(base.size, size=SAMPLE_SIZE, replace=False).tolist())
            sampled[name] = coords
        else:
            coords = range(base.size)
            sampled[name] = None
        worst = 0.0
        flat_a = analytic[k].reshape(-1)
        for c in coords:
            vals = list(tensors)
            plus = base.copy().reshape(-1)
            plus[c] += eps
            minus = base.copy().reshape(-1)
            minus[c] -= eps
            vals[k] = Tensor(plus.reshape(base.shape))
            f_plus = evaluate(vals)
            vals[k] = Tensor(minus.reshape(base.shape))
            f_minus = evaluate(vals)
            num = (f_plus - f_minus) / (2 * eps)
            a = float(flat_a[c])
            rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, rel)
        errors[name] = worst
    passed = all(e < threshold for e in errors.values())
    return GradCheckReport(errors, eps, threshold, sampled, passed)
