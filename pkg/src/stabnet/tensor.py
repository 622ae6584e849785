"""Dense tensors and a minimal reverse-mode autodiff tape.

Values are stored as 32-bit floats; reductions accumulate in 64-bit. The
``precision`` context switches newly created tensors to another dtype, which
``grad_check`` uses to run finite differences in 64-bit.

Every differentiable op builds its output with :func:`make_node`, handing it a
closure that maps the output gradient to one gradient per parent.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DimensionError, NumericError, ParameterError

_dtype: type = np.float32

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the storage dtype of newly created tensors."""
    global _dtype
    old = _dtype
    _dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = old


def default_dtype() -> type:
    return _dtype


class Tensor:
    """An n-dimensional array (0 to 4 dims) that can take part in backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=_dtype)
        if arr.ndim > 4:
            raise DimensionError(f"tensors have at most 4 dims, got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        self.grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    # operator sugar for the common elementwise ops
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


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


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap an op result; ``data`` keeps its dtype (no cast to the default)."""
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data)
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    out.op = op
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _scalar(value: float, like: np.ndarray) -> np.ndarray:
    return np.asarray(value, dtype=like.dtype)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return make_node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    k = a.data.dtype.type(c)
    return make_node(a.data * k, (a,), lambda g: (g * k,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_node(np.maximum(a.data, 0), (a,), lambda g: (g * mask,), "relu")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature bias: ``b`` has length ``x.shape[1]`` and broadcasts over the rest."""
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match input {x.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    axes = tuple(i for i in range(x.ndim) if i != 1)

    def backward(g):
        return g, g.sum(axis=axes, dtype=np.float64).astype(g.dtype)

    return make_node(x.data + b.data.reshape(view), (x, b), backward, "add_bias")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)
    if out.ndim > 4:
        raise DimensionError(f"reshape: at most 4 dims, got {out.shape}")
    return make_node(out, (a,), lambda g: (g.reshape(src),), "reshape")


# ---------------------------------------------------------------------------
# reductions (64-bit accumulation)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    total = np.sum(a.data, dtype=np.float64)
    return make_node(
        _scalar(total, a.data), (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.data.dtype),), "sum"
    )


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    total = np.sum(a.data, dtype=np.float64) / n

    def backward(g):
        return (np.full(a.shape, float(g) / n, dtype=a.data.dtype),)

    return make_node(_scalar(total, a.data), (a,), backward, "mean")


def sq_l2_norm(a: Tensor) -> Tensor:
    """Squared Euclidean norm over all entries."""
    x64 = a.data.astype(np.float64)
    total = np.dot(x64.ravel(), x64.ravel())
    return make_node(_scalar(total, a.data), (a,), lambda g: ((2.0 * g) * a.data,), "sq_l2_norm")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return make_node(a.data @ b.data, (a, b), backward, "matmul")


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation, lowered to one matmul via im2col.

    x: [B, Cin, H, W]; kernel: [Cout, Cin, kh, kw] -> [B, Cout, H', W'].
    """
    if stride < 1 or pad < 0:
        raise ParameterError(f"conv2d: stride must be >= 1 and pad >= 0, got stride={stride} pad={pad}")
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    B, C, H, W = x.shape
    F, _, kh, kw = kernel.shape
    if H + 2 * pad < kh or W + 2 * pad < kw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * pad}x{W + 2 * pad}")
    oh = conv_output_size(H, kh, stride, pad)
    ow = conv_output_size(W, kw, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    xt = xp.transpose(1, 0, 2, 3)  # [C, B, Hp, Wp]
    # cols[(c, u, v), (b, i, j)] = xp[b, c, u + stride*i, v + stride*j]
    cols = np.empty((C, kh, kw, B, oh, ow), dtype=x.data.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, u, v] = xt[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride]
    cols = cols.reshape(C * kh * kw, B * oh * ow)
    kmat = kernel.data.reshape(F, C * kh * kw)
    out = (kmat @ cols).reshape(F, B, oh, ow).transpose(1, 0, 2, 3)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(F, B * oh * ow)
        gk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        if not x.requires_grad:
            return None, gk
        gcols = (kmat.T @ g2).reshape(C, kh, kw, B, oh, ow)
        gxt = np.zeros((C, B, H + 2 * pad, W + 2 * pad), dtype=g.dtype)
        for u in range(kh):
            for v in range(kw):
                gxt[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride] += gcols[:, u, v]
        gx = gxt.transpose(1, 0, 2, 3)
        gx = gx[:, :, pad : pad + H, pad : pad + W] if pad else gx
        return np.ascontiguousarray(gx), gk

    return make_node(np.ascontiguousarray(out), (x, kernel), backward, "conv2d")


# ---------------------------------------------------------------------------
# softmax


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax over the last axis with max-subtraction."""
    if logits.ndim not in (1, 2) or logits.shape[-1] < 2:
        raise DimensionError(f"softmax expects [C] or [B, C] with C >= 2, got {logits.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        return (p * (g - dot),)

    return make_node(p, (logits,), backward, "softmax")


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-3) -> float:
    """Largest relative error between the analytic gradient of ``f`` at ``x``
    and central finite differences, all evaluated in 64-bit.

    ``f`` must be deterministic: stochastic layers inside it have to reseed
    their streams on every call.
    """
    if not eps > 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with precision(np.float64):
        xt = Tensor(x0, requires_grad=True)
        y = f(xt)
        if y.data.size != 1:
            raise DimensionError(f"grad_check needs a scalar-valued f, got shape {y.shape}")
        y.backward()
        analytic = np.zeros_like(x0) if xt.grad is None else xt.grad.astype(np.float64)
        if not np.all(np.isfinite(analytic)) or not np.isfinite(y.data).all():
            raise NumericError("non-finite value in analytic gradient")

        numeric = np.empty_like(x0)
        flat = x0.ravel()
        for i in range(flat.size):
            xp = flat.copy()
            xp[i] += eps
            fp = float(f(Tensor(xp.reshape(x0.shape))).data)
            xp[i] -= 2 * eps
            fm = float(f(Tensor(xp.reshape(x0.shape))).data)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite function value at coordinate {i}")
            numeric.flat[i] = (fp - fm) / (2 * eps)
    rel = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))
    return float(rel.max()) if rel.size else 0.0
