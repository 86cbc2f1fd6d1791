"""Minimal float64 tensors with reverse-mode differentiation.

Every op checks shapes up front and refuses to emit non-finite values.
Broadcasting is limited to scalar scaling and trailing-block bias adds
(``add_bias``); everything else requires exactly matching shapes.
"""

from __future__ import annotations

import math
import zlib
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError, NumericError, ParameterError

ArrayLike = Union[np.ndarray, Sequence[float], float]


# --------------------------------------------------------------------------
# Seeding
# --------------------------------------------------------------------------


def _key_to_int(key: Union[int, str]) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ParameterError(f"seed keys must be non-negative, got {key}")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def make_rng(seed: int, *keys: Union[int, str]) -> np.random.Generator:
    """Return an independent generator for the stream ``(seed, *keys)``.

    This is the single split function used across the package: each
    consumer names its stream with a tuple of ints/strings, strings are
    mapped through CRC32, and the tuple becomes the ``spawn_key`` of a
    :class:`numpy.random.SeedSequence` rooted at ``seed``. Two different
    key tuples give statistically independent streams; the same tuple
    always reproduces the same stream.
    """
    if seed < 0:
        raise ParameterError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *keys: Union[int, str]) -> int:
    """Integer child seed for stream ``(seed, *keys)`` (fits in 63 bits)."""
    return int(make_rng(seed, *keys).integers(0, 2**63 - 1))


# --------------------------------------------------------------------------
# Tensor and graph
# --------------------------------------------------------------------------


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite value in result")


class Tensor:
    """A float64 array that can take part in a differentiation graph.

    Leaves are created directly; interior nodes are created by the ops in
    this module and remember their parents plus a closure mapping the
    upstream gradient to one gradient per parent.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward: Optional[Callable[[np.ndarray], tuple]] = None,
        op: str = "leaf",
    ):
        # interior nodes own freshly computed arrays; only leaves copy
        arr = np.array(data, dtype=np.float64) if op == "leaf" else np.asarray(data, dtype=np.float64)
        _check_finite(arr, op)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self.shape))

    def __rsub__(self, other):
        return sub(_wrap(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _wrap(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape == ():
        arr = np.full(shape, float(arr))
    return Tensor(arr)


def as_tensor(x, requires_grad: bool = False) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=requires_grad)


def _node(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if needs:
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every grad-tracking leaf."""
    if root.data.size != 1 or root.ndim > 1:
        raise ContractError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --------------------------------------------------------------------------
# Pure-array kernels (shared by Tensor ops and by non-differentiable code)
# --------------------------------------------------------------------------


def softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax along ``axis``."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax: non-finite input")
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def logsumexp_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


# --------------------------------------------------------------------------
# Differentiable ops
# --------------------------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    if np.any(b.data == 0):
        raise NumericError("div: zero denominator")
    out = a.data / b.data
    return _node(out, (a, b), lambda g: (g / b.data, -g * out / b.data), "div")


def scale(x: Tensor, c: float) -> Tensor:
    return _node(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` where ``b`` matches the trailing dimensions of ``x``."""
    nb = b.ndim
    if nb > x.ndim or x.shape[x.ndim - nb:] != b.shape:
        raise DimensionError(f"add_bias: bias {b.shape} does not trail {x.shape}")
    lead = tuple(range(x.ndim - nb))
    return _node(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with gradient ``g·bᵀ`` / ``aᵀ·g``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product of (B, M, K) and (B, K, N)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm: cannot multiply {a.shape} by {b.shape}")

    def _bw(g):
        return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g

    return _node(a.data @ b.data, (a, b), _bw, "bmm")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {x.shape} -> {shape}: {exc}") from None
    src = x.shape
    return _node(out, (x,), lambda g: (g.reshape(src),), "reshape")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log: non-positive input")
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth everywhere, so finite differences agree)."""
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    out = 0.5 * v * (1.0 + t)

    def _bw(g):
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * d,)

    return _node(out, (x,), _bw, "gelu")


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy
    if axis is None:
        src = x.shape
        return _node(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, src).copy(),), "sum")
    ax = axis % x.ndim

    def _bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),)

    return _node(x.data.sum(axis=ax), (x,), _bw, "sum")


def mean(x: Tensor) -> Tensor:
    return scale(sum(x), 1.0 / x.data.size)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis (each "row" sums to one)."""
    y = softmax_array(x.data, axis=-1)

    def _bw(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _node(y, (x,), _bw, "softmax_rows")


def log_softmax_rows(x: Tensor) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError("log_softmax: non-finite input")
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def _bw(g):
        return (g - sm * np.sum(g, axis=-1, keepdims=True),)

    return _node(out, (x,), _bw, "log_softmax_rows")


def logsumexp(beta: float, x):
    """``β⁻¹·log Σᵢ exp(β·xᵢ)``, max-shifted.

    A plain array gives back a float; a 1-D :class:`Tensor` gives back a
    scalar tensor wired into the graph.
    """
    if not beta > 0:
        raise ParameterError(f"logsumexp: beta must be > 0, got {beta}")
    if isinstance(x, Tensor):
        if x.ndim != 1:
            raise DimensionError(f"logsumexp: expected a vector, got {x.shape}")
        if not np.all(np.isfinite(x.data)):
            raise NumericError("logsumexp: non-finite input")
        bx = beta * x.data
        val = logsumexp_array(bx) / beta
        w = softmax_array(bx)
        return _node(np.asarray(val), (x,), lambda g: (g * w,), "logsumexp")
    arr = np.asarray(x, dtype=np.float64).ravel()
    if arr.size == 0:
        raise DimensionError("logsumexp: empty input")
    if not np.all(np.isfinite(arr)):
        raise NumericError("logsumexp: non-finite input")
    return float(logsumexp_array(beta * arr) / beta)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gamma``/``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def _bw(g):
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(out, (x, gamma, beta), _bw, "layer_norm")


# --------------------------------------------------------------------------
# Finite-difference oracle
# --------------------------------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-6,
    indices: Optional[Iterable[int]] = None,
) -> float:
    """Max relative error between backprop and central differences.

    The error of entry ``i`` is ``|analytic - fd| / max(1, |fd|)``.
    ``indices`` restricts the comparison to a subset of flat positions,
    which keeps checks on large parameter tensors affordable.
    """
    if not (0 < eps <= 1e-3):
        raise ParameterError(f"grad_check: eps must lie in (0, 1e-3], got {eps}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise ContractError(f"grad_check: f must return a scalar, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: f(x) is not finite")
    backward(out)
    analytic = np.zeros_like(base) if leaf.grad is None else leaf.grad

    def _eval(arr: np.ndarray) -> float:
        val = f(Tensor(arr)).item()
        if not math.isfinite(val):
            raise NumericError("grad_check: f is not finite near x")
        return val

    flat_idx = range(base.size) if indices is None else indices
    worst = 0.0
    for i in flat_idx:
        pos = np.unravel_index(int(i), base.shape) if base.ndim else ()
        plus = base.copy()
        minus = base.copy()
        plus[pos] += eps
        minus[pos] -= eps
        fd = (_eval(plus) - _eval(minus)) / (2.0 * eps)
        err = abs(float(analytic[pos]) - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst
