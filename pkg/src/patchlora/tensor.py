"""Dense tensors with reverse-mode automatic differentiation.

Storage is a numpy array. Every operation whose inputs require gradients
returns a tensor that remembers its inputs and a closure mapping the output
gradient to input gradients. :func:`backward` orders that graph into a
:class:`ComputeTape` and visits each recorded operation once, in reverse.

Broadcasting is deliberately narrow: operands must have equal shapes, one of
them must be a scalar, or the smaller shape must be a suffix of the larger one
(a row vector over a matrix, a bias over a batch of token matrices).
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

from .exceptions import ContractError, DimensionError, NumericError

DEFAULT_DTYPE = np.float64
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def resolve_dtype(name) -> np.dtype:
    dt = np.dtype(name)
    if dt not in _FLOAT_DTYPES:
        raise ContractError(f"unsupported dtype {dt}; use float64 or float32")
    return dt


class Tensor:
    """N-dimensional real array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_inputs", "_backward", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._inputs: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basic properties -------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a scalar")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None):
        return reduce("sum", self, axis)

    def mean(self, axis=None):
        return reduce("mean", self, axis)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def parameter(data, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or DEFAULT_DTYPE), requires_grad=True)


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = tuple(inputs)
        out._backward = backward_fn
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise DimensionError(f"{op}: shapes {sa} and {sb} are not broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.reshape((-1,) + shape).sum(axis=0)


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        return (g * c,)

    return _result(a.data * a.dtype.type(c), (a,), bw, "scale")


def elementwise(op: str, a, b) -> Tensor:
    """Dispatch on ``op`` in {add, sub, mul, scale}."""
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "scale":
        if isinstance(b, Tensor):
            if b.size != 1:
                raise DimensionError(f"scale: factor must be scalar, got shape {b.shape}")
            b = b.item()
        return scale(as_tensor(a), b)
    raise ContractError(f"unknown elementwise op {op!r}")


# -- linear algebra ---------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading axes are batch axes; ``b`` is either a plain matrix shared across
    the batch or carries the same batch axes as ``a``.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ between {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if shared:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw, "matmul")


# -- shape manipulation -----------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from exc

    def bw(g):
        return (g.reshape(a.shape),)

    return _result(out, (a,), bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(a.data, axes), (a,), bw, "transpose")


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def getitem(a: Tensor, index) -> Tensor:
    basic = _is_basic(index)

    def bw(g):
        out = np.zeros_like(a.data)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _result(a.data[index], (a,), bw, "getitem")


# -- reductions -------------------------------------------------------------
def reduce(op: str, a: Tensor, axis=None) -> Tensor:
    """Sum or mean over ``axis`` (all axes when ``None``)."""
    if op not in ("sum", "mean"):
        raise ContractError(f"unknown reduction {op!r}")
    if axis is not None:
        if not -a.ndim <= axis < a.ndim:
            raise DimensionError(f"{op}: axis {axis} out of range for shape {a.shape}")
        axis = axis % a.ndim
        count = a.shape[axis]
    else:
        count = a.size
    out = a.data.sum(axis=axis)
    if op == "mean":
        out = out / count

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        if op == "mean":
            g = g / count
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out, dtype=a.dtype), (a,), bw, op)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    return reduce("sum", a, axis)


def mean(a: Tensor, axis=None) -> Tensor:
    return reduce("mean", a, axis)


# -- nonlinearities ---------------------------------------------------------
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction.

    ``-inf`` entries are allowed (masked logits) as long as every row keeps at
    least one finite value.
    """
    if np.isnan(a.data).any():
        raise NumericError("softmax: NaN in input")
    m = a.data.max(axis=axis, keepdims=True)
    if not np.isfinite(m).all():
        raise NumericError("softmax: a row has no finite entry")
    e = np.exp(a.data - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (a,), bw, "softmax")


def softmax_rows(a: Tensor) -> Tensor:
    return softmax(a, axis=-1)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit (population) variance."""
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    D = a.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match last axis of {a.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = g.reshape(-1, D)
        dgamma = (lead * xhat.reshape(-1, D)).sum(axis=0)
        dbeta = lead.sum(axis=0)
        dxhat = g * gamma.data
        da = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return da, dgamma, dbeta

    return _result(out, (a, gamma, beta), bw, "layer_norm")


_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_TANH_K = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor, approximate: str = "erf") -> Tensor:
    """GELU, exact (``"erf"``) or the tanh approximation (``"tanh"``)."""
    x = a.data
    if approximate == "erf":
        cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
        out = x * cdf

        def bw(g):
            return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    elif approximate == "tanh":
        inner = _TANH_K * (x + 0.044715 * x ** 3)
        t = np.tanh(inner)
        out = 0.5 * x * (1.0 + t)

        def bw(g):
            dinner = _TANH_K * (1.0 + 3 * 0.044715 * x * x)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    else:
        raise ContractError(f"gelu: unknown form {approximate!r}")
    return _result(out.astype(a.dtype, copy=False), (a,), bw, "gelu")


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the mask comes from ``rng`` so runs are reproducible."""
    if p <= 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {p}")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / a.dtype.type(1.0 - p)
    return mul(a, Tensor(keep))


# -- backward ---------------------------------------------------------------
class ComputeTape:
    """Operations reachable from an output, in topological order.

    Each entry is a non-leaf tensor; its inputs appear earlier on the tape
    (or are leaves).
    """

    def __init__(self, ops: list[Tensor]):
        self.ops = ops

    @classmethod
    def record(cls, output: Tensor) -> "ComputeTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or node.is_leaf:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for inp in node._inputs:
                if inp.requires_grad and not inp.is_leaf and id(inp) not in seen:
                    stack.append((inp, False))
        return cls(order)

    def __len__(self):
        return len(self.ops)

    def run_backward(self, output: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(output): seed}
        for node in reversed(self.ops):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g
            for inp, gi in zip(node._inputs, node._backward(g)):
                if not inp.requires_grad or gi is None:
                    continue
                if inp.is_leaf:
                    gi = np.asarray(gi, dtype=inp.dtype).reshape(inp.shape)
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    grads[key] = gi if key not in grads else grads[key] + gi


def backward(loss: Tensor) -> ComputeTape:
    """Populate ``.grad`` on every tracked tensor reachable from ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor that requires gradients")
    seed = np.ones(loss.shape, dtype=loss.dtype)
    if loss.is_leaf:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return ComputeTape([])
    tape = ComputeTape.record(loss)
    tape.run_backward(loss, seed)
    return tape
