"""Reverse-mode autodiff over dense numpy arrays.

Deliberately small: only the ops the transformer forward pass and the
training objectives need, each with an explicit backward closure. No
broadcasting beyond trailing-axis additions; shape mistakes fail loudly at
the op boundary. Graphs are built per call and replayed once in a fixed
topological order, so identical inputs give bit-identical results.

Leaf tensors may carry an externally owned gradient buffer (e.g. a numpy
view into a shared parameter store); accumulation is always in-place so
gradients written through a view land in the parent buffer.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


_default_dtype = np.float32
_grad_enabled = True


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"dtype must be float32 or float64, got {dtype}")
    _default_dtype = dtype.type


def default_dtype():
    return _default_dtype


class no_grad:
    """Context manager: ops executed inside build no graph."""

    def __enter__(self):
        global _grad_enabled
        self._prev, _grad_enabled = _grad_enabled, False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._backward = None
        self._prev = ()

    @classmethod
    def param(cls, data: np.ndarray, grad: np.ndarray) -> "Tensor":
        """Leaf over externally owned data/grad buffers (may be views)."""
        t = cls.__new__(cls)
        t.data = data
        t.grad = grad
        t.requires_grad = _grad_enabled
        t._backward = None
        t._prev = ()
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t._backward = None
        t._prev = ()
        return t

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        self.grad = np.ones_like(self.data)
        for node in reversed(_topo_order(self)):
            if node._backward is not None:
                node._backward()

    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, scalar):
        return scale(self, scalar)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _topo_order(root: Tensor) -> list[Tensor]:
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            stack.append((parent, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g  # in-place: writes through buffer views


def _result(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    out._backward = None
    out._prev = parents if out.requires_grad else ()
    return out


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.data.dtype} and {b.data.dtype}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may match a trailing suffix of ``a``'s shape."""
    _check_same_dtype(a, b, "add")
    if a.shape != b.shape:
        k = b.data.ndim
        if k == 0 or a.data.ndim < k or a.shape[-k:] != b.shape:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not align")
    out = _result(a.data + b.data, (a, b))
    if out.requires_grad:
        lead = a.data.ndim - b.data.ndim

        def backward():
            if a.requires_grad:
                _accumulate(a, out.grad)
            if b.requires_grad:
                g = out.grad.sum(axis=tuple(range(lead))) if lead else out.grad
                _accumulate(b, g)

        out._backward = backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``[..., m, k] @ [k, n]`` or ``[..., m, k] @ [..., k, n]``."""
    _check_same_dtype(a, b, "matmul")
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    if b.data.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} vs {b.shape}")
    out = _result(np.matmul(a.data, b.data), (a, b))
    if out.requires_grad:

        def backward():
            g = out.grad
            if a.requires_grad:
                _accumulate(a, np.matmul(g, b.data.swapaxes(-1, -2)))
            if b.requires_grad:
                if b.data.ndim == 2 and a.data.ndim > 2:
                    k = a.shape[-1]
                    n = g.shape[-1]
                    gb = np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, n))
                else:
                    gb = np.matmul(a.data.swapaxes(-1, -2), g)
                _accumulate(b, gb)

        out._backward = backward
    return out


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = _result(x.data * x.data.dtype.type(s), (x,))
    if out.requires_grad:

        def backward():
            if x.requires_grad:
                _accumulate(x, out.grad * x.data.dtype.type(s))

        out._backward = backward
    return out


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = _result(np.ascontiguousarray(x.data).reshape(shape), (x,))
    if out.requires_grad:

        def backward():
            if x.requires_grad:
                _accumulate(x, out.grad.reshape(x.shape))

        out._backward = backward
    return out


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = _result(np.transpose(x.data, axes), (x,))
    if out.requires_grad:
        inverse = tuple(np.argsort(axes))

        def backward():
            if x.requires_grad:
                _accumulate(x, np.transpose(out.grad, inverse))

        out._backward = backward
    return out


def swap_last2(x: Tensor) -> Tensor:
    if x.data.ndim < 2:
        raise ShapeError(f"swap_last2: need at least 2 dims, got {x.shape}")
    out = _result(x.data.swapaxes(-1, -2), (x,))
    if out.requires_grad:

        def backward():
            if x.requires_grad:
                _accumulate(x, out.grad.swapaxes(-1, -2))

        out._backward = backward
    return out


def relu(x: Tensor) -> Tensor:
    out = _result(np.maximum(x.data, 0), (x,))
    if out.requires_grad:

        def backward():
            if x.requires_grad:
                _accumulate(x, out.grad * (x.data > 0))

        out._backward = backward
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Stable softmax over the trailing axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _result(y, (x,))
    if out.requires_grad:

        def backward():
            if x.requires_grad:
                g = out.grad
                dot = (g * y).sum(axis=-1, keepdims=True)
                _accumulate(x, (g - dot) * y)

        out._backward = backward
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean / unit variance, then affine."""
    n = x.shape[-1]
    if n < 1 or gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(
            f"layer_norm: x {x.shape} needs gain/bias of shape ({n},), got {gain.shape}/{bias.shape}"
        )
    _check_same_dtype(x, gain, "layer_norm")
    _check_same_dtype(x, bias, "layer_norm")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = centered * inv_std
    out = _result(xhat * gain.data + bias.data, (x, gain, bias))
    if out.requires_grad:

        def backward():
            g = out.grad
            lead = tuple(range(g.ndim - 1))
            if gain.requires_grad:
                _accumulate(gain, (g * xhat).sum(axis=lead))
            if bias.requires_grad:
                _accumulate(bias, g.sum(axis=lead))
            if x.requires_grad:
                gx = g * gain.data
                mean_g = gx.mean(axis=-1, keepdims=True)
                mean_gx = (gx * xhat).mean(axis=-1, keepdims=True)
                _accumulate(x, (gx - mean_g - xhat * mean_gx) * inv_std)

        out._backward = backward
    return out


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared element differences, as a scalar."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    _check_same_dtype(a, b, "mse")
    diff = a.data - b.data
    out = _result(np.asarray((diff * diff).mean(), dtype=a.data.dtype), (a, b))
    if out.requires_grad:
        n = diff.size

        def backward():
            g = out.grad * (2.0 / n) * diff
            if a.requires_grad:
                _accumulate(a, g)
            if b.requires_grad:
                _accumulate(b, -g)

        out._backward = backward
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-d, got {logits.shape}")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} does not match {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ShapeError(f"cross_entropy: labels outside [0, {c})")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(n), labels].mean()
    out = _result(np.asarray(loss, dtype=logits.data.dtype), (logits,))
    if out.requires_grad:

        def backward():
            if logits.requires_grad:
                probs = np.exp(log_probs)
                probs[np.arange(n), labels] -= 1.0
                _accumulate(logits, out.grad * probs / n)

        out._backward = backward
    return out


def gather_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of a 2-d tensor; repeated indices accumulate gradient."""
    if x.data.ndim != 2:
        raise ShapeError(f"gather_rows: need a 2-d tensor, got {x.shape}")
    indices = np.asarray(indices)
    if indices.ndim != 1:
        raise ShapeError(f"gather_rows: indices must be 1-d, got {indices.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows: index outside [0, {x.shape[0]})")
    out = _result(x.data[indices], (x,))
    if out.requires_grad:

        def backward():
            if x.requires_grad:
                g = np.zeros_like(x.data)
                np.add.at(g, indices, out.grad)
                _accumulate(x, g)

        out._backward = backward
    return out
