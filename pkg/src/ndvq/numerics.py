"""Reverse-mode differentiation over float64 numpy arrays, plus Adam.

A :class:`Tensor` records the operation that produced it. Calling
:meth:`Tensor.backward` on a scalar output accumulates ``adjoint`` on every
tensor that took part in the computation. Only the operations this codec
needs are provided; there is no broadcasting beyond what numpy does for
scalar/array pairs of identical shape or scalars.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DomainError(ValueError):
    """An operation was evaluated outside the domain where it is differentiable."""


class GradCheckError(RuntimeError):
    """Finite-difference evaluation produced a non-finite value."""

    def __init__(self, coordinate: int, message: str):
        super().__init__(f"coordinate {coordinate}: {message}")
        self.coordinate = coordinate


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # reduce a broadcast gradient back to the operand's shape
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A value in a recorded computation together with its accumulated adjoint."""

    __slots__ = ("value", "_adjoint", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, value, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.value = _as_array(value)
        self._adjoint = None  # allocated on first accumulation
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward: Callable[[], None] | None = None
        self.op = op

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, op={self.op or 'leaf'})"

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    @property
    def adjoint(self) -> np.ndarray:
        if self._adjoint is None:
            return np.zeros_like(self.value)
        return self._adjoint

    @adjoint.setter
    def adjoint(self, grad) -> None:
        self._adjoint = _as_array(grad)

    def zero_grad(self) -> None:
        self._adjoint = None

    # -- graph traversal -------------------------------------------------

    def _topo(self) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self, seed=None) -> None:
        """Accumulate d(self)/d(node) into ``adjoint`` for every recorded ancestor."""
        if seed is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.value)
        self.adjoint = self.adjoint + _as_array(seed)
        for node in reversed(self._topo()):
            if node._backward is not None and node._adjoint is not None:
                node._backward()

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other) -> Tensor:
        return sub(other, self)

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other) -> Tensor:
        return div(other, self)

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __getitem__(self, key) -> Tensor:
        return index(self, key)

    def sum(self, axis=None) -> Tensor:
        return tsum(self, axis)

    def mean(self, axis=None) -> Tensor:
        return mean(self, axis)

    def reshape(self, *shape) -> Tensor:
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def tensor(x, requires_grad: bool = False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


def record(value, parents: Sequence[Tensor], op: str, backward: Callable[[Tensor], None]) -> Tensor:
    out = Tensor(value, _parents=tuple(parents), op=op)
    if out.requires_grad:
        out._backward = lambda: backward(out)
    return out


def accumulate(t: Tensor, grad: np.ndarray) -> None:
    if t.requires_grad:
        grad = _unbroadcast(np.asarray(grad, dtype=np.float64), t.value.shape)
        t._adjoint = grad if t._adjoint is None else t._adjoint + grad


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)

    def bw(out):
        accumulate(a, out.adjoint)
        accumulate(b, out.adjoint)

    return record(a.value + b.value, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)

    def bw(out):
        accumulate(a, out.adjoint)
        accumulate(b, -out.adjoint)

    return record(a.value - b.value, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)

    def bw(out):
        accumulate(a, out.adjoint * b.value)
        accumulate(b, out.adjoint * a.value)

    return record(a.value * b.value, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if np.any(b.value == 0):
        raise DomainError("division by zero")

    def bw(out):
        accumulate(a, out.adjoint / b.value)
        accumulate(b, -out.adjoint * a.value / b.value**2)

    return record(a.value / b.value, (a, b), "div", bw)


def square(a) -> Tensor:
    a = tensor(a)
    return record(a.value**2, (a,), "square", lambda out: accumulate(a, 2.0 * a.value * out.adjoint))


def absolute(a) -> Tensor:
    """|a| with subgradient 0 at a == 0."""
    a = tensor(a)
    return record(np.abs(a.value), (a,), "abs", lambda out: accumulate(a, np.sign(a.value) * out.adjoint))


def sqrt(a) -> Tensor:
    a = tensor(a)
    if np.any(a.value < 0):
        raise DomainError("sqrt of a negative value")
    value = np.sqrt(a.value)

    def bw(out):
        if np.any(value[out.adjoint != 0] == 0):
            raise DomainError("sqrt gradient is unbounded at 0")
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(out.adjoint != 0, out.adjoint / (2.0 * value), 0.0)
        accumulate(a, g)

    return record(value, (a,), "sqrt", bw)


def log(a) -> Tensor:
    a = tensor(a)
    if np.any(a.value <= 0):
        raise DomainError("log of a non-positive value")
    return record(np.log(a.value), (a,), "log", lambda out: accumulate(a, out.adjoint / a.value))


def exp(a) -> Tensor:
    a = tensor(a)
    value = np.exp(a.value)
    return record(value, (a,), "exp", lambda out: accumulate(a, out.adjoint * value))


def maximum(a, c: float) -> Tensor:
    """max(a, c) for a constant c; the gradient goes to ``a`` only where a > c."""
    a = tensor(a)
    return record(np.maximum(a.value, c), (a,), "max", lambda out: accumulate(a, out.adjoint * (a.value > c)))


def elu(a, alpha: float = 1.0) -> Tensor:
    a = tensor(a)
    neg = alpha * np.expm1(np.minimum(a.value, 0.0))
    value = np.where(a.value > 0, a.value, neg)
    return record(value, (a,), "elu", lambda out: accumulate(a, out.adjoint * np.where(a.value > 0, 1.0, neg + alpha)))


def stop_gradient(a) -> Tensor:
    """Forward value of ``a`` with no path back to it."""
    return Tensor(tensor(a).value)


# -- reductions and shape ------------------------------------------------


def tsum(a, axis=None) -> Tensor:
    a = tensor(a)

    def bw(out):
        g = out.adjoint
        if axis is not None:
            g = np.expand_dims(g, axis)
        accumulate(a, np.broadcast_to(g, a.value.shape))

    return record(a.value.sum(axis=axis), (a,), "sum", bw)


def mean(a, axis=None) -> Tensor:
    a = tensor(a)
    n = a.value.size if axis is None else np.prod([a.value.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis) * (1.0 / n)


def rms(a) -> Tensor:
    """Root-mean-square of all entries; subgradient 0 when every entry is 0."""
    a = tensor(a)
    value = np.sqrt(np.mean(a.value**2))

    def bw(out):
        if value > 0:
            accumulate(a, out.adjoint * a.value / (a.value.size * value))

    return record(value, (a,), "rms", bw)


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    return record(a.value.reshape(shape), (a,), "reshape", lambda out: accumulate(a, out.adjoint.reshape(a.value.shape)))


def transpose(a, axes) -> Tensor:
    a = tensor(a)
    inverse = np.argsort(axes)
    return record(a.value.transpose(axes), (a,), "transpose", lambda out: accumulate(a, out.adjoint.transpose(inverse)))


def index(a, key) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in the backward pass."""
    a = tensor(a)

    keys = key if isinstance(key, tuple) else (key,)
    basic = all(k is None or k is Ellipsis or isinstance(k, (int, slice)) for k in keys)

    def bw(out):
        g = np.zeros_like(a.value)
        if basic:
            g[key] = out.adjoint
        else:
            np.add.at(g, key, out.adjoint)
        accumulate(a, g)

    return record(a.value[key], (a,), "index", bw)


def take_rows(table, rows: np.ndarray) -> Tensor:
    """``table[rows]`` for a 2-D table; faster backward than :func:`index`."""
    table = tensor(table)
    rows = np.asarray(rows)

    def bw(out):
        g = np.zeros_like(table.value)
        np.add.at(g, rows, out.adjoint)
        accumulate(table, g)

    return record(table.value[rows], (table,), "take_rows", bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [tensor(p) for p in parts]
    sizes = np.cumsum([p.value.shape[axis] for p in parts])[:-1]

    def bw(out):
        for p, g in zip(parts, np.split(out.adjoint, sizes, axis=axis)):
            accumulate(p, g)

    return record(np.concatenate([p.value for p in parts], axis=axis), parts, "concat", bw)


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)

    def bw(out):
        g = out.adjoint
        if a.requires_grad:
            accumulate(a, g @ np.swapaxes(b.value, -1, -2))
        if b.requires_grad:
            gb = np.swapaxes(a.value, -1, -2) @ g
            accumulate(b, gb.reshape(-1, *b.value.shape).sum(axis=0) if gb.ndim > b.value.ndim else gb)

    return record(a.value @ b.value, (a, b), "matmul", bw)


# -- convolutions --------------------------------------------------------


def pad1d(x, left: int, right: int) -> Tensor:
    """Zero-pad the last axis."""
    x = tensor(x)
    if left == 0 and right == 0:
        return x
    widths = [(0, 0)] * (x.value.ndim - 1) + [(left, right)]
    n = x.value.shape[-1]
    return record(np.pad(x.value, widths), (x,), "pad", lambda out: accumulate(x, out.adjoint[..., left:left + n]))


def conv1d(x, weight, bias=None, stride: int = 1) -> Tensor:
    """Valid 1-D cross-correlation. x: (B, Cin, L); weight: (Cout, Cin, k); bias: (Cout,)."""
    x, weight = tensor(x), tensor(weight)
    parents = [x, weight]
    _, _, length = x.value.shape
    _, _, k = weight.value.shape
    n_out = (length - k) // stride + 1
    if n_out < 1:
        raise ValueError(f"input length {length} shorter than kernel {k}")
    span = stride * (n_out - 1) + 1
    # (B, Cin, Lout, k)
    cols = np.stack([x.value[:, :, j:j + span:stride] for j in range(k)], axis=-1)
    y = np.tensordot(cols, weight.value, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    if bias is not None:
        bias = tensor(bias)
        parents.append(bias)
        y = y + bias.value[None, :, None]

    def bw(out):
        g = out.adjoint  # (B, Cout, Lout)
        if weight.requires_grad:
            accumulate(weight, np.tensordot(g, cols, axes=([0, 2], [0, 2])))
        if bias is not None and bias.requires_grad:
            accumulate(bias, g.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = np.tensordot(g, weight.value, axes=([1], [0]))  # (B, Lout, Cin, k)
            gx = np.zeros_like(x.value)
            for j in range(k):
                gx[:, :, j:j + span:stride] += gcols[:, :, :, j].transpose(0, 2, 1)
            accumulate(x, gx)

    return record(y, parents, "conv1d", bw)


def conv_transpose1d(x, weight, bias=None, stride: int = 1) -> Tensor:
    """Transposed 1-D convolution. x: (B, Cin, L); weight: (Cin, Cout, k).

    Output length is ``(L - 1) * stride + k``.
    """
    x, weight = tensor(x), tensor(weight)
    parents = [x, weight]
    batch, _, length = x.value.shape
    _, cout, k = weight.value.shape
    n_out = (length - 1) * stride + k
    span = stride * (length - 1) + 1
    # (B, L, Cout, k)
    contrib = np.tensordot(x.value, weight.value, axes=([1], [0]))
    y = np.zeros((batch, cout, n_out))
    for j in range(k):
        y[:, :, j:j + span:stride] += contrib[:, :, :, j].transpose(0, 2, 1)
    if bias is not None:
        bias = tensor(bias)
        parents.append(bias)
        y = y + bias.value[None, :, None]

    def bw(out):
        g = out.adjoint
        gcols = np.stack([g[:, :, j:j + span:stride] for j in range(k)], axis=-1)  # (B, Cout, L, k)
        if x.requires_grad:
            accumulate(x, np.tensordot(gcols, weight.value, axes=([1, 3], [1, 2])).transpose(0, 2, 1))
        if weight.requires_grad:
            accumulate(weight, np.tensordot(x.value, gcols, axes=([0, 2], [0, 2])))
        if bias is not None and bias.requires_grad:
            accumulate(bias, g.sum(axis=(0, 2)))

    return record(y, parents, "conv_transpose1d", bw)


# -- gradient checking ---------------------------------------------------


def grad_check(
    function: Callable[[Tensor], Tensor],
    point,
    step: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Largest ``|analytic - central difference| / max(1, |analytic|)`` over coordinates.

    ``function`` maps a tensor shaped like ``point`` to a scalar tensor.
    ``coords`` restricts the comparison to a subset of flat coordinates.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = _as_array(point)
    x = Tensor(point.copy(), requires_grad=True)
    out = function(x)
    if not np.isfinite(out.value).all():
        raise GradCheckError(-1, "non-finite value at the base point")
    out.backward()
    analytic = x.adjoint.reshape(-1)
    flat = point.reshape(-1)
    worst = 0.0
    for i in range(flat.size) if coords is None else coords:
        values = []
        for delta in (step, -step):
            probe = flat.copy()
            probe[i] += delta
            v = float(function(Tensor(probe.reshape(point.shape))).value)
            if not np.isfinite(v):
                raise GradCheckError(int(i), f"non-finite value at offset {delta:+g}")
            values.append(v)
        numeric = (values[0] - values[1]) / (2.0 * step)
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(analytic[i])))
    return worst


# -- Adam ----------------------------------------------------------------


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> AdamState:
        return cls(np.zeros_like(params, dtype=np.float64), np.zeros_like(params, dtype=np.float64))


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Returns new params and a new state."""
    if not (params.shape == grads.shape == state.first_moment.shape == state.second_moment.shape):
        raise ValueError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, "
            f"moments {state.first_moment.shape}/{state.second_moment.shape}"
        )
    if learning_rate < 0:
        raise ValueError("learning_rate must be non-negative")
    t = state.step_count + 1
    m = beta1 * state.first_moment + (1.0 - beta1) * grads
    v = beta2 * state.second_moment + (1.0 - beta2) * grads**2
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_params = params - learning_rate * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m, v, t)


@dataclass
class Adam:
    """Adam over a dict of named parameter tensors, with optional global-norm clipping."""

    params: dict[str, Tensor]
    learning_rate: float = 3e-4
    clip_norm: float | None = None
    states: dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.states.setdefault(name, AdamState.zeros_like(p.value))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(p.adjoint**2)) for p in self.params.values())))

    def step(self) -> float:
        """Apply one update in place; returns the pre-clipping gradient norm."""
        norm = self.grad_norm()
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for name, p in self.params.items():
            p.value, self.states[name] = adam_step(p.value, p.adjoint * scale, self.states[name], self.learning_rate)
        return norm
