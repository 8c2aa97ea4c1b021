"""
Reverse-mode automatic differentiation over float64 numpy arrays.

A ``Tensor`` wraps an array and, when produced by a ``Function``, the
context needed to push gradients back to its parents. ``Tensor.backward``
walks the graph in reverse topological order and accumulates gradients
onto leaf tensors created with ``requires_grad=True``.

Every forward and backward result is checked for NaN/Inf.
"""

import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from pulseface.errors import NumericalError, RangeError, ShapeError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Build no graph inside the block (inference, validation)."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


def _check_finite(values: np.ndarray, where: str) -> None:
    if not np.isfinite(values).all():
        raise NumericalError(f"{where} produced non-finite values")


class Tensor:
    def __init__(self, data, requires_grad: bool = False, ctx=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.ctx = ctx

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __neg__(self):
        return Neg.apply(self)

    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def sqrt(self):
        return Sqrt.apply(self)

    def relu(self):
        return Relu.apply(self)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf with ``requires_grad``."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise ShapeError("backward without an explicit gradient", self.shape, ())
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError("backward", grad.shape, self.shape)

        # iterative post-order DFS; recursion would overflow on deep graphs
        order, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node.ctx is not None:
                for parent in node.ctx.parents:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.ctx is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node.ctx.parents, node.ctx.backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                _check_finite(parent_grad, f"{type(node.ctx).__name__}.backward")
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(values) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shapes(op: str, *shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(op, *shapes) from None


class Function:
    def __init__(self, *parents: Tensor):
        self.parents = parents
        self.needs_grad = tuple(p.requires_grad for p in parents)

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = [as_tensor(x) for x in inputs]
        ctx = cls(*tensors)
        out = ctx.forward(*[t.data for t in tensors], **kwargs)
        _check_finite(out, f"{cls.__name__}.forward")
        requires = grad_enabled() and any(ctx.needs_grad)
        return Tensor(out, requires_grad=requires, ctx=ctx if requires else None)

    def forward(self, *args, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple:
        raise NotImplementedError


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Add(Function):
    def forward(self, x, y):
        _broadcast_shapes("add", x.shape, y.shape)
        self.shapes = x.shape, y.shape
        return x + y

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, x, y):
        _broadcast_shapes("sub", x.shape, y.shape)
        self.shapes = x.shape, y.shape
        return x - y

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, x, y):
        _broadcast_shapes("mul", x.shape, y.shape)
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return (
            _unbroadcast(grad * self.y, self.x.shape),
            _unbroadcast(grad * self.x, self.y.shape),
        )


class Div(Function):
    def forward(self, x, y):
        _broadcast_shapes("div", x.shape, y.shape)
        if (y == 0).any():
            raise NumericalError("division by zero")
        self.x, self.y = x, y
        return x / y

    def backward(self, grad):
        return (
            _unbroadcast(grad / self.y, self.x.shape),
            _unbroadcast(-grad * self.x / self.y**2, self.y.shape),
        )


class Pow(Function):
    def forward(self, x, exponent: float):
        self.x, self.exponent = x, exponent
        return x**exponent

    def backward(self, grad):
        return (grad * self.exponent * self.x ** (self.exponent - 1.0),)


class Sqrt(Function):
    def forward(self, x):
        if (x < 0).any():
            raise NumericalError("sqrt of a negative value")
        self.out = np.sqrt(x)
        return self.out

    def backward(self, grad):
        # the derivative at exactly zero is taken as zero
        safe = np.where(self.out > 0, self.out, 1.0)
        return (np.where(self.out > 0, grad * 0.5 / safe, 0.0),)


class Relu(Function):
    def forward(self, x):
        self.positive = x > 0
        return np.where(self.positive, x, 0.0)

    def backward(self, grad):
        return (grad * self.positive,)


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        out = np.asarray(x.mean(axis=axis, keepdims=keepdims))
        self.count = x.size // max(out.size, 1)
        return out

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, self.shape).copy(),)


class Reshape(Function):
    def forward(self, x, shape):
        self.shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError:
            raise ShapeError("reshape", x.shape, tuple(shape)) from None

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class MatMul(Function):
    def forward(self, x, y):
        if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
            raise ShapeError("matmul", x.shape, y.shape)
        self.x, self.y = x, y
        return x @ y

    def backward(self, grad):
        return grad @ self.y.T, self.x.T @ grad


def _triple(value) -> tuple[int, int, int]:
    if isinstance(value, int):
        return value, value, value
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise RangeError(f"expected 3 values, got {value}")
    return value


class Conv3d(Function):
    """Stride-1 3-D cross-correlation. x: N x Cin x T x H x W, w: Cout x Cin x kT x kH x kW."""

    def forward(self, x, w, b, padding=(0, 0, 0)):
        if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
            raise ShapeError("conv3d", x.shape, w.shape, b.shape)
        pt, ph, pw = padding
        xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
        if any(xp.shape[2 + i] < w.shape[2 + i] for i in range(3)):
            raise ShapeError("conv3d kernel larger than padded input", xp.shape, w.shape)
        self.x_shape, self.padding, self.w = x.shape, padding, w
        self.windows = sliding_window_view(xp, w.shape[2:], axis=(2, 3, 4))
        out = np.stack(
            [np.tensordot(win, w, axes=([0, 4, 5, 6], [1, 2, 3, 4])) for win in self.windows]
        )
        return np.moveaxis(out, -1, 1) + b[None, :, None, None, None]

    def backward(self, grad):
        needs_x, needs_w, needs_b = self.needs_grad
        gx = gw = gb = None
        if needs_b:
            gb = grad.sum(axis=(0, 2, 3, 4))
        if needs_w:
            gw = sum(
                np.tensordot(g, win, axes=([1, 2, 3], [1, 2, 3]))
                for g, win in zip(grad, self.windows)
            )
        if needs_x:
            kt, kh, kw = self.w.shape[2:]
            gpad = np.pad(grad, ((0, 0), (0, 0), (kt - 1, kt - 1), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            flipped = self.w[:, :, ::-1, ::-1, ::-1]
            gwin = sliding_window_view(gpad, (kt, kh, kw), axis=(2, 3, 4))
            full = np.stack(
                [np.tensordot(win, flipped, axes=([0, 4, 5, 6], [0, 2, 3, 4])) for win in gwin]
            )
            full = np.moveaxis(full, -1, 1)
            pt, ph, pw = self.padding
            _, _, t, h, w = self.x_shape
            gx = full[:, :, pt : pt + t, ph : ph + h, pw : pw + w]
        return gx, gw, gb


class AvgPool3d(Function):
    """Non-overlapping average pooling (stride = kernel); trailing remainders are dropped."""

    def forward(self, x, kernel=(1, 2, 2)):
        if x.ndim != 5:
            raise ShapeError("avgpool3d", x.shape, ("N", "C", "T", "H", "W"))
        kt, kh, kw = kernel
        n, c, t, h, w = x.shape
        to, ho, wo = t // kt, h // kh, w // kw
        if min(to, ho, wo) == 0:
            raise ShapeError("avgpool3d kernel larger than input", x.shape, kernel)
        self.x_shape, self.kernel = x.shape, kernel
        cropped = x[:, :, : to * kt, : ho * kh, : wo * kw]
        return cropped.reshape(n, c, to, kt, ho, kh, wo, kw).mean(axis=(3, 5, 7))

    def backward(self, grad):
        kt, kh, kw = self.kernel
        spread = grad / (kt * kh * kw)
        spread = np.repeat(np.repeat(np.repeat(spread, kt, axis=2), kh, axis=3), kw, axis=4)
        gx = np.zeros(self.x_shape)
        gx[:, :, : spread.shape[2], : spread.shape[3], : spread.shape[4]] = spread
        return (gx,)


class UpsampleTemporal(Function):
    """Nearest-neighbour upsampling along the time axis (axis 2)."""

    def forward(self, x, factor=2):
        if x.ndim != 5:
            raise ShapeError("upsample_temporal", x.shape, ("N", "C", "T", "H", "W"))
        self.factor = factor
        return np.repeat(x, factor, axis=2)

    def backward(self, grad):
        n, c, t, h, w = grad.shape
        return (grad.reshape(n, c, t // self.factor, self.factor, h, w).sum(axis=3),)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, padding=0) -> Tensor:
    return Conv3d.apply(x, weight, bias, padding=_triple(padding))


def avgpool3d(x: Tensor, kernel=(1, 2, 2)) -> Tensor:
    return AvgPool3d.apply(x, kernel=_triple(kernel))


def upsample_temporal(x: Tensor, factor: int = 2) -> Tensor:
    return UpsampleTemporal.apply(x, factor=int(factor))


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x: N x in, weight: in x out, bias: out."""
    return MatMul.apply(x, weight) + bias


def global_pool(x: Tensor, axes=(2, 3, 4)) -> Tensor:
    """Average over the given axes (default: time and space of an N x C x T x H x W map)."""
    return x.mean(axis=tuple(axes))


def numerical_gradient(fn, inputs: list[Tensor], index: int, eps: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn(*inputs)`` with respect to ``inputs[index]``."""
    target = inputs[index].data
    grad = np.zeros_like(target)
    with no_grad():
        for idx in np.ndindex(target.shape):
            original = target[idx]
            target[idx] = original + eps
            plus = fn(*inputs).item()
            target[idx] = original - eps
            minus = fn(*inputs).item()
            target[idx] = original
            grad[idx] = (plus - minus) / (2 * eps)
    return grad


def gradcheck(fn, inputs: list[Tensor], eps: float = 1e-4) -> float:
    """
    Largest relative error between analytic and finite-difference gradients.

    ``fn`` must map the inputs to a scalar Tensor. Errors are measured
    per input as ||analytic - numeric|| / max(||analytic|| + ||numeric||, 1e-12).
    """
    for t in inputs:
        t.grad = None
    fn(*inputs).backward()
    worst = 0.0
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_gradient(fn, inputs, i, eps)
        scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst
