"""Dense tensors with reverse-mode differentiation.

Each op computes its forward value with numpy and records a backward rule
mapping the output gradient to one gradient per parent. ``backward``
sweeps the graph in reverse topological order; intermediate gradients live
only for the sweep, leaf gradients accumulate into ``Tensor.grad``.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.backward_fn = None
        self.name = name
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def is_leaf(self) -> bool:
        return not self.parents

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None:
        arr = arr.astype(like.dtype, copy=False)
    return Tensor(arr)


def _node(data, parents, backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from exc


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape(a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape(a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), bw, "mul")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def bw(g):
        return (g * pos,)

    return _node(np.where(pos, x.data, 0).astype(x.dtype, copy=False), (x,), bw, "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    a = xd.dtype.type(0.044715)
    t = np.tanh(c * (xd + a * xd * xd * xd))

    def bw(g):
        dt = (1 - t * t) * c * (1 + 3 * a * xd * xd)
        return (g * (0.5 * (1 + t) + 0.5 * xd * dt),)

    return _node(0.5 * xd * (1 + t), (x,), bw, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)

    def bw(g):
        return (g * y * (1 - y),)

    return _node(y, (x,), bw, "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    axis = _check_axis(axis, x.ndim)
    n = x.shape[axis]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({n},), got {gain.shape}, {bias.shape}")
    bshape = [1] * x.ndim
    bshape[axis] = n
    gd = gain.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gd + bias.data.reshape(bshape)
    other = tuple(i for i in range(x.ndim) if i != axis)

    def bw(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=axis, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=axis, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=other)
        if bias.requires_grad:
            gbias = g.sum(axis=other)
        return gx, ggain, gbias

    return _node(out, (x, gain, bias), bw, "layer_norm")


# -- linear algebra and shapes ---------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        # fold leading axes into one GEMM; much faster than a stacked matmul
        k, m = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (m,))
    else:
        try:
            out = np.matmul(a.data, b.data)
        except ValueError as exc:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = gb = None
        if b.ndim == 2:
            g2 = g.reshape(-1, m)
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a2.T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(out, (a, b), bw, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc

    def bw(g):
        return (g.reshape(x.shape),)

    return _node(out, (x,), bw, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _node(np.transpose(x.data, axes), (x,), bw, "transpose")


def mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    axes = tuple(_check_axis(a, x.ndim) for a in axes)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype, copy=True),)

    return _node(out, (x,), bw, "mean")


def sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    if axes is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    axes = tuple(_check_axis(a, x.ndim) for a in axes)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _node(out, (x,), bw, "sum")


def conv3d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Channels-last 3D convolution (cross-correlation), stride 1.

    x: (B, X, Y, Z, Cin); kernels: (k, k, k, Cin, Cout); bias: (Cout,).
    """
    if padding not in (0, 1):
        raise ShapeError("conv3d padding must be 0 or 1")
    if x.ndim != 5 or kernels.ndim != 5:
        raise ShapeError(f"conv3d expects 5-d input and kernels, got {x.shape}, {kernels.shape}")
    k, k2, k3, cin, cout = kernels.shape
    if not k == k2 == k3:
        raise ShapeError("conv3d kernels must be cubic")
    if x.shape[-1] != cin:
        raise ShapeError(f"conv3d channel mismatch: input {x.shape[-1]}, kernels {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv3d bias must have shape ({cout},)")
    B, X, Y, Z, _ = x.shape
    p = padding
    xo, yo, zo = X + 2 * p - k + 1, Y + 2 * p - k + 1, Z + 2 * p - k + 1
    if min(xo, yo, zo) < 1:
        raise ShapeError("conv3d kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p), (0, 0))) if p else x.data
    cols = np.empty((B, xo, yo, zo, k, k, k, cin), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            for c in range(k):
                cols[:, :, :, :, a, b, c, :] = xp[:, a:a + xo, b:b + yo, c:c + zo, :]
    cols2 = cols.reshape(-1, k * k * k * cin)
    w2 = kernels.data.reshape(-1, cout)
    out = (cols2 @ w2).reshape(B, xo, yo, zo, cout)
    if bias is not None:
        out = out + bias.data
    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = gk = gb = None
        if kernels.requires_grad:
            gk = (cols2.T @ g2).reshape(kernels.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(B, xo, yo, zo, k, k, k, cin)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for a in range(k):
                for b in range(k):
                    for c in range(k):
                        gxp[:, a:a + xo, b:b + yo, c:c + zo, :] += gcols[:, :, :, :, a, b, c, :]
            gx = gxp[:, p:p + X, p:p + Y, p:p + Z, :] if p else gxp
        return (gx, gk) if bias is None else (gx, gk, gb)

    return _node(out, parents, bw, "conv3d")


# -- reverse sweep ---------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict:
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` to reset.
    Returns a map from leaf name (or the leaf itself when unnamed) to grad.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    pending = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(_topo_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf():
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[node.name if node.name is not None else node] = node.grad
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            pending[key] = pg if key not in pending else pending[key] + pg
    return leaves
