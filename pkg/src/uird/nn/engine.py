"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` records the operation that produced it; :func:`backward`
walks the recorded graph in reverse topological order. Only the handful of
operations needed by the models in this package are provided.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class GraphFreedError(RuntimeError):
    """Raised when backward is requested through a graph that was already released."""


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_CHECK_FINITE = False


def set_finite_checks(enabled: bool) -> None:
    """Toggle NaN/Inf detection after every operation (slow, for debugging)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype == np.float32:
        return arr
    return arr.astype(np.float64, copy=False)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_freed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._freed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._freed

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Create a graph node.

    ``backward(grad_out)`` must return one gradient (or ``None``) per parent.
    """
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced by operation")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None, *, accumulate: bool = False,
             retain_graph: bool = False) -> None:
    """Propagate gradients from ``loss`` into every leaf tensor requiring grad.

    Leaf gradients are reset before accumulation unless ``accumulate`` is set.
    The graph is released afterwards unless ``retain_graph`` is set; a second
    backward through a released graph raises :class:`GraphFreedError`.
    """
    if loss._freed:
        raise GraphFreedError("graph has already been freed; pass retain_graph=True to reuse it")
    if not loss.requires_grad:
        return
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError("backward without an explicit gradient needs a scalar loss")
        grad = np.ones_like(loss.data)
    order = _topological(loss)
    if not accumulate:
        for node in order:
            if node.is_leaf and node.requires_grad:
                node.grad = None
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if node._freed:
                raise GraphFreedError("graph has already been freed; pass retain_graph=True to reuse it")
            if node.requires_grad and g is not None:
                if node.grad is None:
                    node.grad = np.array(g, dtype=node.data.dtype, copy=True)
                else:
                    node.grad = node.grad + g
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if not accumulate:
        # leaves that received no gradient still get a defined zero slot
        for node in order:
            if node.is_leaf and node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.data)
    if not retain_graph:
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._freed = True


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return custom_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return custom_op(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return custom_op(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def _back(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return custom_op(out, (a, b), _back)


def power(a: Tensor, exponent: float) -> Tensor:
    a = _wrap(a)
    return custom_op(a.data ** exponent, (a,),
                     lambda g: (g * exponent * a.data ** (exponent - 1),))


def square(a: Tensor) -> Tensor:
    a = _wrap(a)
    return custom_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)
    return custom_op(out, (a,), lambda g: (g * 0.5 / out,))


def exp(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the argument is clamped from below first.

    Below the floor the gradient is zero, so it stays finite at the clamp.
    """
    a = _wrap(a)
    if floor is None:
        return custom_op(np.log(a.data), (a,), lambda g: (g / a.data,))
    active = a.data > floor
    clamped = np.where(active, a.data, floor)
    return custom_op(np.log(clamped), (a,), lambda g: (np.where(active, g / clamped, 0.0),))


def sigmoid(a: Tensor) -> Tensor:
    a = _wrap(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return custom_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    a = _wrap(a)
    mask = a.data >= 0
    scale = np.where(mask, 1.0, slope).astype(a.data.dtype)
    return custom_op(a.data * scale, (a,), lambda g: (g * scale,))


def absolute(a: Tensor) -> Tensor:
    a = _wrap(a)
    sign = np.sign(a.data)
    return custom_op(np.abs(a.data), (a,), lambda g: (g * sign,))


# ----------------------------------------------------------------- reductions / shape


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return custom_op(np.asarray(out), (a,), _back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(count))


def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _wrap(a)
    inverse = None if axes is None else np.argsort(axes)
    return custom_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def _back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return custom_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, _back)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    return custom_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# ----------------------------------------------------------------- layers


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    x = _wrap(x)
    if x.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _back(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return custom_op(out, parents, _back)


def conv_output_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def tconv_output_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length - 1) * stride - 2 * padding + kernel


def _im2col(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    n, c, _ = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    windows = sliding_window_view(xp, kernel, axis=2)[:, :, ::stride, :]
    l_out = windows.shape[2]
    return windows.transpose(0, 2, 1, 3).reshape(n * l_out, c * kernel)


def _col2im(cols: np.ndarray, n: int, c: int, length: int, kernel: int,
            stride: int, padding: int) -> np.ndarray:
    l_out = conv_output_length(length, kernel, stride, padding)
    cols = cols.reshape(n, l_out, c, kernel)
    xp = np.zeros((n, c, length + 2 * padding), dtype=cols.dtype)
    stop = stride * (l_out - 1) + 1
    for j in range(kernel):
        xp[:, :, j:j + stop:stride] += cols[:, :, :, j].transpose(0, 2, 1)
    return xp[:, :, padding:padding + length] if padding else xp


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    n, _, length = x.shape
    c_out, _, kernel = w.shape
    l_out = conv_output_length(length, kernel, stride, padding)
    if l_out <= 0:
        raise ShapeError(f"conv1d output length {l_out} <= 0 (L={length}, k={kernel}, "
                         f"s={stride}, p={padding})")
    cols = _im2col(x, kernel, stride, padding)
    out = (cols @ w.reshape(c_out, -1).T).reshape(n, l_out, c_out).transpose(0, 2, 1)
    return np.ascontiguousarray(out), cols


def _conv_grad_input(g: np.ndarray, w: np.ndarray, stride: int, padding: int, length: int):
    n, c_out, l_out = g.shape
    _, c_in, kernel = w.shape
    g2 = g.transpose(0, 2, 1).reshape(n * l_out, c_out)
    cols = g2 @ w.reshape(c_out, -1)
    return _col2im(cols, n, c_in, length, kernel, stride, padding)


def _conv_grad_weight(g: np.ndarray, cols: np.ndarray, w_shape) -> np.ndarray:
    n, c_out, l_out = g.shape
    g2 = g.transpose(0, 2, 1).reshape(n * l_out, c_out)
    return (g2.T @ cols).reshape(w_shape)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N, C_in, L) with ``weight`` (C_out, C_in, k)."""
    x = _wrap(x)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with weight {weight.shape}")
    out, cols = _conv_forward(x.data, weight.data, stride, padding)
    if bias is not None:
        out = out + bias.data[None, :, None]
    length = x.shape[2]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _back(g):
        grads = [_conv_grad_input(g, weight.data, stride, padding, length) if x.requires_grad else None,
                 _conv_grad_weight(g, cols, weight.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    return custom_op(out, parents, _back)


def tconv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
            stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution: the adjoint of :func:`conv1d` with shared weights.

    ``weight`` has shape (C_in, C_out, k) where C_in is the channel count of ``x``.
    """
    x = _wrap(x)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"tconv1d: input {x.shape} incompatible with weight {weight.shape}")
    kernel = weight.shape[2]
    l_out = tconv_output_length(x.shape[2], kernel, stride, padding)
    if l_out <= 0:
        raise ShapeError(f"tconv1d output length {l_out} <= 0")
    if conv_output_length(l_out, kernel, stride, padding) != x.shape[2]:
        raise ShapeError("tconv1d: incompatible stride/padding for input length")
    out = _conv_grad_input(x.data, weight.data, stride, padding, l_out)
    if bias is not None:
        out = out + bias.data[None, :, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _back(g):
        gx, g_cols = _conv_forward(g, weight.data, stride, padding)
        grads = [gx, _conv_grad_weight(x.data, g_cols, weight.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    return custom_op(out, parents, _back)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.9,
              eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of (N, C) or (N, C, L) input.

    In training mode batch statistics are used and the running buffers are
    updated in place as ``running = momentum * running + (1 - momentum) * batch``.
    """
    x = _wrap(x)
    axes = (0,) if x.ndim == 2 else (0, 2)
    shape = (1, -1) if x.ndim == 2 else (1, -1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    count = x.data.size // x.shape[1]

    def _back(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(shape)
        if training:
            dx = (inv_std.reshape(shape) / count) * (
                count * dxhat
                - dxhat.sum(axis=axes).reshape(shape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape))
        else:
            dx = dxhat * inv_std.reshape(shape)
        return dx, dgamma, dbeta

    return custom_op(out, (x, gamma, beta), _back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return custom_op(out, (a,), _back)


def softmax_cross_entropy(logits: Tensor, targets, reduction: str = "mean"):
    """Stabilized softmax cross-entropy.

    Returns ``(loss, probabilities)``; ``targets`` are integer class indices.
    """
    logits = _wrap(logits)
    targets = np.asarray(targets, dtype=np.intp)
    z = logits.data
    if z.ndim == 1:
        z = z[None, :]
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    total = e.sum(axis=1, keepdims=True)
    probs = e / total
    rows = np.arange(z.shape[0])
    per_sample = np.log(total[:, 0]) - shifted[rows, np.atleast_1d(targets)]
    n = z.shape[0]
    if reduction == "mean":
        value, scale = per_sample.mean(), 1.0 / n
    elif reduction == "sum":
        value, scale = per_sample.sum(), 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def _back(g):
        d = probs.copy()
        d[rows, np.atleast_1d(targets)] -= 1.0
        d *= g * scale
        return (d.reshape(logits.shape),)

    loss = custom_op(np.asarray(value), (logits,), _back)
    return loss, (probs if logits.ndim == 2 else probs[0])


def cosine_similarity(z: Tensor, m: Tensor, eps: float = 1e-24) -> Tensor:
    """Pairwise cosine similarity between rows of ``z`` (N, d) and ``m`` (K, d).

    A zero row yields similarity 0 instead of NaN.
    """
    z, m = _wrap(z), _wrap(m)
    squeeze = z.ndim == 1
    if squeeze:
        z = reshape(z, (1, -1))
    if m.ndim == 1:
        m = reshape(m, (1, -1))
    zn = z / sqrt(tsum(square(z), axis=1, keepdims=True) + eps)
    mn = m / sqrt(tsum(square(m), axis=1, keepdims=True) + eps)
    out = matmul(zn, transpose(mn))
    return reshape(out, (-1,)) if squeeze else out


