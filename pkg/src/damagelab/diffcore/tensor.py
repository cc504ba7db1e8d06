"""Dense arrays with a reverse-mode tape.

A ``Tensor`` wraps a numpy array. Operations on tensors that require
gradients record their parents and a closure that maps the output adjoint to
input adjoints; :func:`backward` walks the recorded tape in reverse
topological order. Tensors that do not require gradients record nothing, so
inference runs at plain numpy speed.

Layout convention for images is channel-last ``(batch, height, width,
channels)``.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_CHECKED = False


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""


class NonFiniteError(FloatingPointError):
    """Raised in checked mode when an op produces NaN or Inf."""


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Reject non-finite values at every op boundary inside the block."""
    global _CHECKED
    prev = _CHECKED
    _CHECKED = enabled
    try:
        yield
    finally:
        _CHECKED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    __array_priority__ = 1000  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return index_select(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], op: str, backward_fn) -> Tensor:
    if _CHECKED and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from op '{op}'")
    parents = tuple(parents)
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# -- elementwise --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _make(
        a.data + b.data,
        (a, b),
        "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _make(
        a.data - b.data,
        (a, b),
        "sub",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _make(
        a.data * b.data,
        (a, b),
        "mul",
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        "div",
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def power(a, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a constant real exponent."""
    a = as_tensor(a)
    out = a.data**exponent
    if exponent == 0:
        return _make(out, (a,), "power", lambda g: (np.zeros_like(a.data),))
    return _make(out, (a,), "power", lambda g: (g * exponent * a.data ** (exponent - 1),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    # np.maximum keeps NaN visible instead of mapping it to 0
    return _make(np.maximum(a.data, 0).astype(a.data.dtype), (a,), "relu", lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), "sqrt", lambda g: (g * 0.5 / out,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is passed only strictly inside."""
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), "clip", lambda g: (g * inside,))


def hinge(a) -> Tensor:
    """``max(0, a)``; subgradient 0 at the kink, same rule as ``relu``."""
    t = relu(a)
    t.op = "hinge"
    return t


# -- reductions ---------------------------------------------------------------


def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return _make(out, (a,), "sum", lambda g: (_expand(g, a.shape, axis, keepdims).copy(),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size // max(out.size, 1)
    return _make(
        out,
        (a,),
        "mean",
        lambda g: (_expand(g, a.shape, axis, keepdims) / count,),
    )


# -- linear algebra and image ops --------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product of 2-D operands (the leading operand may be batched)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(a.data @ b.data, (a, b), "matmul", backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {a.shape}")
    return _make(a.data.T, (a,), "transpose", lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def conv2d(x, weight, bias=None) -> Tensor:
    """Stride-1 convolution with zero padding that preserves spatial size.

    ``x`` is ``(B, H, W, Cin)``; ``weight`` is ``(k, k, Cin, Cout)`` with odd
    ``k``; ``bias`` is ``(Cout,)``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    k, k2, cin, cout = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {weight.shape[:2]}")
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input has {x.shape[-1]} channels, weight expects {cin}")
    b, h, w, _ = x.shape
    pad = k // 2
    if k == 1:
        cols = x.data.reshape(-1, cin)
    else:
        xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        # (B, H, W, Cin, k, k) -> (B, H, W, k, k, Cin)
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, k * k * cin)
    wmat = weight.data.reshape(k * k * cin, cout)
    out = (cols @ wmat).reshape(b, h, w, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(weight.shape)
        gcols = g2 @ wmat.T
        if k == 1:
            return gcols.reshape(x.shape), gw
        gcols = gcols.reshape(b, h, w, k, k, cin)
        gxp = np.zeros((b, h + 2 * pad, w + 2 * pad, cin), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + h, j : j + w, :] += gcols[:, :, :, i, j, :]
        return gxp[:, pad : pad + h, pad : pad + w, :], gw

    result = _make(out, (x, weight), "conv2d", backward)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {cout} outputs")
        result = add(result, bias)
    return result


def upsample2x(x) -> Tensor:
    """Nearest-neighbour ×2 upsampling of a ``(B, H, W, C)`` map."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample2x: expected (B, H, W, C), got {x.shape}")
    b, h, w, c = x.shape
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)
    return _make(
        out,
        (x,),
        "upsample2x",
        lambda g: (g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)),),
    )


def grid_avg_pool(x, g: int) -> Tensor:
    """Average ``(B, H, W, C)`` over a ``g × g`` grid of equal blocks."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"grid_avg_pool: expected (B, H, W, C), got {x.shape}")
    b, h, w, c = x.shape
    if h % g or w % g:
        raise ShapeError(f"grid_avg_pool: grid {g} does not divide {h}x{w}")
    bh, bw = h // g, w // g
    out = x.data.reshape(b, g, bh, g, bw, c).mean(axis=(2, 4))

    def backward(gr):
        spread = np.broadcast_to(gr[:, :, None, :, None, :] / (bh * bw), (b, g, bh, g, bw, c))
        return (spread.reshape(x.shape),)

    return _make(out, (x,), "grid_avg_pool", backward)


def index_select(a, index) -> Tensor:
    """Gather ``a[index]`` with any numpy index; the backward scatter-adds."""
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _make(np.array(out), (a,), "gather", backward)


def masked_select(a, mask) -> Tensor:
    """1-D tensor of the entries where ``mask`` is true; zero gradient elsewhere."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"masked_select: mask {mask.shape} does not match {a.shape}")

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[mask] = g
        return (ga,)

    return _make(a.data[mask], (a,), "masked_select", backward)


def scatter(values, mask, shape) -> Tensor:
    """Inverse of :func:`masked_select`: place ``values`` where ``mask`` is true."""
    values = as_tensor(values)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape) or int(mask.sum()) != values.size:
        raise ShapeError(f"scatter: {values.size} values do not fill mask of shape {mask.shape}")
    out = np.zeros(shape, dtype=values.data.dtype)
    out[mask] = values.data
    return _make(out, (values,), "scatter", lambda g: (g[mask],))


def l2_normalize_rows(a, eps: float = 1e-12) -> Tensor:
    """Divide each row by ``sqrt(sum(row**2) + eps)``."""
    a = as_tensor(a)
    norm = sqrt(add(sum(mul(a, a), axis=-1, keepdims=True), eps))
    return div(a, norm)


# -- reverse pass ---------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=parent.data.dtype).reshape(parent.shape)
