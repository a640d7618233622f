"""Dense float64 tensors with reverse-mode differentiation.

Every operation returns a fresh immutable :class:`Tensor`. When any input
requires a gradient the result remembers its parents and a closure mapping
the output gradient to input gradients, so the computation trace is rebuilt
on every forward pass. :func:`backward` walks that trace in reverse
topological order.

Broadcasting is never implicit: binary operations accept two tensors of the
same shape or a tensor and a Python scalar. Use :func:`broadcast_to` to
expand a tensor explicitly.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from havit.errors import ContractError, DimensionError, NumericalError

DTYPE = np.float64

_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if not np.isfinite(arr).all():
            raise NumericalError(f"tensor {name or ''} constructed with non-finite values".replace("  ", " "))
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
        if not isinstance(arr, np.ndarray):
            arr = np.array(arr, dtype=DTYPE)
        if not np.isfinite(arr).all():
            raise NumericalError(f"{op} produced non-finite values")
        out = cls.__new__(cls)
        arr.flags.writeable = False
        out.data = arr
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return detach(self)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        if self.ndim == 2 and other.ndim == 2:
            return matmul(self, other)
        return bmm(self, other)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self) -> Tensor:
        return sum_all(self)

    def mean(self) -> Tensor:
        return mean_all(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) and not isinstance(x, bool)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- elementwise -------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return Tensor._wrap(a.data + float(b), "add", (a,), lambda g: (g,))
    _same_shape("add", a, b)
    return Tensor._wrap(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -float(b))
    _same_shape("sub", a, b)
    return Tensor._wrap(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return Tensor._wrap(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        s = float(b)
        return Tensor._wrap(a.data * s, "mul", (a,), lambda g: (g * s,))
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return Tensor._wrap(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU, ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * dinner),)

    return Tensor._wrap(out, "gelu", (x,), backward)


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Plain 2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._wrap(ad @ bd, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over matching leading dims: ``[..., m, k] @ [..., k, p]``."""
    if (a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]
            or a.shape[-1] != b.shape[-2]):
        raise DimensionError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._wrap(
        ad @ bd, "bmm", (a, b),
        lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g),
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` applied over the last axis of ``x``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data
    d_in, d_out = wd.shape

    def backward(g):
        g2 = g.reshape(-1, d_out)
        grads = [g @ wd.T, xd.reshape(-1, d_in).T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._wrap(out, "linear", parents, backward)


# -- shape manipulation ------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and math.prod(shape) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return Tensor._wrap(out.copy(), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return Tensor._wrap(
        np.ascontiguousarray(x.data.transpose(axes)), "transpose", (x,),
        lambda g: (g.transpose(inverse),),
    )


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Repeat ``x`` along new leading axes so that it has ``shape``."""
    shape = tuple(shape)
    lead = len(shape) - x.ndim
    if lead < 0 or shape[lead:] != x.shape:
        raise DimensionError(f"broadcast_to: {x.shape} is not a trailing block of {shape}")
    axes = tuple(range(lead))
    return Tensor._wrap(
        np.broadcast_to(x.data, shape).copy(), "broadcast_to", (x,),
        lambda g: (g.sum(axis=axes),),
    )


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: no tensors given")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise DimensionError(f"concat: shape {t.shape} incompatible with {ref} on axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return Tensor._wrap(out, "concat", tensors, lambda g: tuple(np.split(g, splits, axis=ax)))


def select(x: Tensor, index: int, axis: int) -> Tensor:
    """Take a single index along ``axis``, dropping that axis."""
    ax = axis % x.ndim
    if not -x.shape[ax] <= index < x.shape[ax]:
        raise IndexError(f"select: index {index} out of range for axis of size {x.shape[ax]}")
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        idx = [slice(None)] * len(shape)
        idx[ax] = index
        full[tuple(idx)] = g
        return (full,)

    return Tensor._wrap(np.take(x.data, index, axis=ax), "select", (x,), backward)


def detach(x: Tensor) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.requires_grad = False
    out.name = x.name
    out._parents = ()
    out._backward = None
    return out


# -- reductions --------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor._wrap(np.array(x.data.sum()), "sum", (x,),
                        lambda g: (np.full(shape, float(g), dtype=DTYPE),))


def mean_all(x: Tensor) -> Tensor:
    return mul(sum_all(x), 1.0 / x.size)


# -- neural-net primitives ---------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row maximum."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax_rows: empty last dimension in shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._wrap(y, "softmax_rows", (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be positive, got {eps}")
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"layer_norm: empty feature dimension in shape {x.shape}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._wrap(out, "layer_norm", (x, gamma, beta), backward)


def cross_entropy_smoothed(logits: Tensor, targets, epsilon: float = 0.0) -> Tensor:
    """Batch-mean cross-entropy against label-smoothed targets.

    The target class receives ``1 - epsilon + epsilon / C`` of the mass and
    every other class ``epsilon / C``.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_smoothed: logits must be [B, C], got {logits.shape}")
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"cross_entropy_smoothed: epsilon must lie in [0, 1), got {epsilon}")
    B, C = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape != (B,):
        raise DimensionError(f"cross_entropy_smoothed: {targets.shape[0]} targets for batch of {B}")
    if targets.size and (targets.min() < 0 or targets.max() >= C):
        raise IndexError(f"cross_entropy_smoothed: targets must lie in [0, {C})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    q = np.full((B, C), epsilon / C, dtype=DTYPE)
    q[np.arange(B), targets] += 1.0 - epsilon
    loss = -(q * log_p).sum() / B
    p = np.exp(log_p)

    return Tensor._wrap(np.array(loss), "cross_entropy_smoothed", (logits,),
                        lambda g: (float(g) * (p - q) / B,))


# -- differentiation ---------------------------------------------------------

class GradientStore(dict):
    """Maps each parameter tensor (by identity) to its accumulated gradient."""

    def zero_(self) -> None:
        for key, grad in self.items():
            self[key] = Tensor(np.zeros(grad.shape))


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> GradientStore:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns gradients for every leaf tensor with ``requires_grad`` reached by
    the trace, or for exactly ``params`` when given (zeros for parameters the
    loss does not depend on).
    """
    if loss.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any tensor requiring grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=DTYPE)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if node._backward is None:
            leaves[id(node)] = node
            if g is not None:
                grads[id(node)] = g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    store = GradientStore()
    targets = leaves.values() if params is None else params
    for leaf in targets:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros(leaf.shape, dtype=DTYPE)
        if g.shape != leaf.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {leaf.shape}")
        store[leaf] = Tensor(g)
    return store
