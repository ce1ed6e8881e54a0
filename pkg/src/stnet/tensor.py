"""Dense tensors with reverse-mode automatic differentiation.

Values live in numpy arrays, float32 by default (working precision) or
float64 (used by the gradient-check oracle). Every differentiable operation
records itself on a thread-local tape when at least one input participates
in differentiation; :func:`backward` replays the tape in reverse execution
order, accumulating gradients into the leaves. The tape is rebuilt on every
forward pass and consumed by ``backward``.

A thread-local multiply-accumulate counter can be armed with
:class:`mac_counter` to instrument the matmul/convolution work an expression
actually executes; the attention complexity tests rely on it.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

WORKING_DTYPE = np.float32

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Tensor:
    """N-dimensional real array node.

    Leaves are constructed directly; op outputs come from the functions in
    this module. After :func:`backward`, every ``requires_grad`` leaf holds
    its gradient (a numpy array of the same shape) in ``grad``. ``name`` is
    an optional stable path used to address parameters.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(WORKING_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tag})"

    # convenience arithmetic; scalars are adopted at the tensor's dtype
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self) -> "Tensor":
        return scale(tensor_sum(self), 1.0 / self.size)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)

    def backward(self) -> dict[str, np.ndarray]:
        return backward(self)


def _raise_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def parameter(data, name: str, dtype=None) -> Tensor:
    """Leaf tensor that participates in differentiation."""
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


# --------------------------------------------------------------------------
# tape machinery
# --------------------------------------------------------------------------

class _TapeNode:
    __slots__ = ("out", "inputs", "grad_fn")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], grad_fn: Callable):
        self.out = out
        self.inputs = inputs
        self.grad_fn = grad_fn


class Tape:
    """Execution-ordered record of differentiable ops.

    Appending in execution order guarantees the topological invariant:
    every op's inputs were produced by earlier entries (or are leaves).
    """

    def __init__(self):
        self.nodes: list[_TapeNode] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()


class _ThreadState(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True
        self.macs: dict[str, int] | None = None


_state = _ThreadState()


def active_tape() -> Tape:
    return _state.tape


class no_grad:
    """Context manager that suppresses tape recording."""

    def __enter__(self):
        self._prev = _state.grad_enabled
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class mac_counter:
    """Collects executed multiply-accumulate counts, keyed by op tag.

    Untagged matmuls count under ``"matmul"``; convolutions under ``"conv"``
    unless tagged. Counts cover forward work only.
    """

    def __enter__(self) -> dict[str, int]:
        self._prev = _state.macs
        self.counts: dict[str, int] = {}
        _state.macs = self.counts
        return self.counts

    def __exit__(self, *exc):
        _state.macs = self._prev
        return False


def _count_macs(tag: str, n: int) -> None:
    if _state.macs is not None:
        _state.macs[tag] = _state.macs.get(tag, 0) + int(n)


def _record(out: Tensor, inputs: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _state.tape.nodes.append(_TapeNode(out, inputs, grad_fn))
    return out


def backward(root: Tensor) -> dict[str, np.ndarray]:
    """Reverse pass from a scalar ``root``.

    Sets ``grad`` on every ``requires_grad`` leaf reachable from ``root``
    and returns the gradients of named leaves keyed by name. The tape is
    consumed: a second backward needs a fresh forward pass.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    tape = _state.tape
    if not tape.nodes:
        raise RuntimeError("tape is empty; run a forward pass before backward")

    produced = {id(node.out) for node in tape.nodes}
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[int, Tensor] = {}
    if root.requires_grad and id(root) not in produced:
        leaves[id(root)] = root

    for node in reversed(tape.nodes):
        out_grad = grads.pop(id(node.out), None)
        if out_grad is None:
            continue
        for tensor_in, grad_in in zip(node.inputs, node.grad_fn(out_grad)):
            if grad_in is None or not tensor_in.requires_grad:
                continue
            key = id(tensor_in)
            if key in grads:
                grads[key] = grads[key] + grad_in
            else:
                grads[key] = grad_in
            if key not in produced:
                leaves[key] = tensor_in

    named: dict[str, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        leaf.grad = np.ascontiguousarray(g, dtype=leaf.data.dtype)
        if leaf.name is not None:
            named[leaf.name] = leaf.grad
    tape.reset()
    return named


# --------------------------------------------------------------------------
# shape helpers
# --------------------------------------------------------------------------

def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"{op}: mixed dtypes {a.data.dtype} and {b.data.dtype}")


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --------------------------------------------------------------------------
# elementwise ops
# --------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_dtype(a, b, "add")
    _broadcast_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                           _unbroadcast(g, b.shape)))


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_dtype(a, b, "sub")
    _broadcast_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                           _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_dtype(a, b, "mul")
    _broadcast_shape(a, b, "mul")
    out = Tensor(a.data * b.data)

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), grad_fn)


def scale(a: Tensor, factor: float) -> Tensor:
    c = a.data.dtype.type(factor)
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    out = Tensor(y)
    return _record(out, (x,), lambda g: (g * (y * (1.0 - y)),))


def gelu(x: Tensor) -> Tensor:
    """Gaussian-CDF form: x * Phi(x), no tanh approximation."""
    phi_cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * phi_cdf)

    def grad_fn(g):
        pdf = np.exp(-0.5 * np.square(x.data)) * _INV_SQRT_2PI
        return (g * (phi_cdf + x.data * pdf).astype(x.data.dtype),)

    return _record(out, (x,), grad_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeMismatchError(f"softmax: axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def grad_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (x,), grad_fn)


# --------------------------------------------------------------------------
# structural ops
# --------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    return _record(out, (x,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat of empty sequence")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _record(out, tuple(tensors), grad_fn)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return _record(out, (x,), grad_fn)


# --------------------------------------------------------------------------
# matmul
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor, tag: str = "matmul") -> Tensor:
    """Batched matrix product ``[..,p,q] x [..,q,r] -> [..,p,r]``.

    Leading batch extents broadcast; the inner extents must agree.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul: operands need >=2 dims, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: inner extents differ for {a.shape} x {b.shape}")
    _check_same_dtype(a, b, "matmul")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatchError(f"matmul: batch extents differ for {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)
    p, q, r = a.shape[-2], a.shape[-1], b.shape[-1]
    _count_macs(tag, int(np.prod(out_data.shape[:-2], dtype=np.int64)) * p * q * r)
    out = Tensor(out_data)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _record(out, (a, b), grad_fn)


# --------------------------------------------------------------------------
# gradient checking oracle
# --------------------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central finite differences.

    ``f`` must be a deterministic scalar-valued function of one tensor.
    The relative error uses denominator ``max(|a|, |b|, 1e-8)`` per element.
    Runs at the precision of ``x``; pass float64 data for the trustworthy
    oracle, float32 only to probe working-precision behaviour.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    leaf = Tensor(x.data.copy(), requires_grad=True, name="finite_diff_leaf")
    out = f(leaf)
    if out.size != 1:
        raise ValueError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
    backward(out)
    grad_ad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    flat = leaf.data.reshape(-1)
    grad_fd = np.zeros(flat.shape, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            h = eps * max(1.0, abs(float(orig)))
            flat[i] = orig + h
            f_plus = float(f(leaf).data)
            flat[i] = orig - h
            f_minus = float(f(leaf).data)
            flat[i] = orig
            grad_fd[i] = (f_plus - f_minus) / (2.0 * h)

    a = grad_ad.reshape(-1).astype(np.float64)
    b = grad_fd
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_parameter_gradients(loss_fn: Callable[[], Tensor],
                              params: dict[str, Tensor],
                              eps: float = 1e-5,
                              max_entries: int | None = None,
                              seed: int = 0) -> dict[str, float]:
    """Finite-difference check for in-graph parameters.

    ``loss_fn`` evaluates the scalar loss using ``params`` as live graph
    leaves; one backward provides the analytic gradients, then each
    parameter entry (optionally a seeded subsample of ``max_entries`` per
    tensor) is perturbed in place for the central difference. Returns the
    max relative error per parameter, same metric as
    :func:`finite_diff_check`.
    """
    backward(loss_fn())
    analytic = {}
    for name, p in params.items():
        if p.grad is None:
            raise RuntimeError(f"parameter {name} received no gradient")
        analytic[name] = p.grad.astype(np.float64).reshape(-1)

    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            worst = 0.0
            for i in idx:
                orig = flat[i]
                h = eps * max(1.0, abs(float(orig)))
                flat[i] = orig + h
                f_plus = float(loss_fn().data)
                flat[i] = orig - h
                f_minus = float(loss_fn().data)
                flat[i] = orig
                fd = (f_plus - f_minus) / (2.0 * h)
                ad = analytic[name][i]
                denom = max(abs(ad), abs(fd), 1e-8)
                worst = max(worst, abs(ad - fd) / denom)
            errors[name] = worst
    return errors
