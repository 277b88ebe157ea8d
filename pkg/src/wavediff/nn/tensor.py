"""Reverse-mode autograd over numpy arrays.

Each op records its inputs and a closure mapping the output gradient to
input gradients; :meth:`Tensor.backward` walks the graph in reverse
topological order. Gradients accumulate into ``.grad`` of every tensor that
requires them.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import expit

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other, self.dtype), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), back)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = expit(xd)
    return _result(xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), back)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mse_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    diff = pred.data - target
    n = diff.size
    return _result(np.asarray(np.mean(diff**2)), (pred,), lambda g: (g * 2.0 * diff / n,))


# ----------------------------------------------------------------------------
# volumetric ops, layout (batch, channel, depth, height, width)

_OFFSETS = [(a, b, c) for a in range(3) for b in range(3) for c in range(3)]


def _correlate_flat(xf: np.ndarray, wk: np.ndarray, lo: int, hi: int, shifts) -> np.ndarray:
    """sum_k wk[k] @ xf[:, p + shifts[k]] for p in [lo, hi); zero elsewhere.

    With few input channels each tap GEMM degenerates to an outer product,
    so the shifted windows are stacked and contracted in one GEMM instead.
    """
    cout, cin = wk.shape[1], wk.shape[2]
    out = np.zeros((cout, xf.shape[1]), dtype=xf.dtype)
    if cin <= 2:
        cols = np.stack([xf[:, lo + off : hi + off] for off in shifts]).reshape(27 * cin, hi - lo)
        np.matmul(wk.transpose(1, 0, 2).reshape(cout, 27 * cin), cols, out=out[:, lo:hi])
        return out
    ov = out[:, lo:hi]
    for k, off in enumerate(shifts):
        ov += wk[k] @ xf[:, lo + off : hi + off]
    return out


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3x3 cross-correlation, stride 1, zero padding 1 (same-size output).

    The padded input is flattened per channel so each kernel tap becomes one
    GEMM against a shifted window of the same buffer. Outputs at padding
    positions are garbage and cropped away. The input gradient is the same
    correlation of the padded output gradient with the flipped kernel.
    """
    xd, wd = x.data, w.data
    if xd.ndim != 5 or wd.shape[2:] != (3, 3, 3) or wd.shape[1] != xd.shape[1]:
        raise ValueError(f"conv3d shape mismatch: input {xd.shape}, weight {wd.shape}")
    bsz, cin, d, h, wid = xd.shape
    cout = wd.shape[0]
    pshape = (bsz, d + 2, h + 2, wid + 2)
    s2 = wid + 2
    s1 = (h + 2) * s2
    xp = np.pad(xd.transpose(1, 0, 2, 3, 4), ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    xf = xp.reshape(cin, -1)
    m = xf.shape[1]
    lo, hi = s1 + s2 + 1, m - (s1 + s2 + 1)
    shifts = [(a - 1) * s1 + (b_ - 1) * s2 + (c - 1) for a, b_, c in _OFFSETS]
    wk = np.ascontiguousarray(wd.transpose(2, 3, 4, 0, 1)).reshape(27, cout, cin)
    out = _correlate_flat(xf, wk, lo, hi, shifts)
    if b is not None:
        out += b.data.reshape(cout, 1)
    y = out.reshape((cout,) + pshape)[:, :, 1:-1, 1:-1, 1:-1].transpose(1, 0, 2, 3, 4)

    def back(g):
        gpad = np.zeros((cout,) + pshape, dtype=g.dtype)
        gpad[:, :, 1:-1, 1:-1, 1:-1] = g.transpose(1, 0, 2, 3, 4)
        gflat = gpad.reshape(cout, -1)
        gf = gflat[:, lo:hi]
        gwk = np.empty_like(wk)
        for k, off in enumerate(shifts):
            gwk[k] = gf @ xf[:, lo + off : hi + off].T
        gw = gwk.reshape(3, 3, 3, cout, cin).transpose(3, 4, 0, 1, 2)
        gx = None
        if x.requires_grad:
            # shifts[26 - k] == -shifts[k], so reversing the taps flips the kernel
            flipped = np.ascontiguousarray(wk[::-1].transpose(0, 2, 1))
            gxf = _correlate_flat(gflat, flipped, lo, hi, shifts)
            gx = gxf.reshape((cin,) + pshape)[:, :, 1:-1, 1:-1, 1:-1].transpose(1, 0, 2, 3, 4)
        gb = None if b is None else g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(np.ascontiguousarray(y), parents, back)


def avg_pool3d(x: Tensor) -> Tensor:
    """2x2x2 average pooling."""
    bsz, c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ValueError(f"avg_pool3d needs even spatial size, got {x.shape}")
    y = x.data.reshape(bsz, c, d // 2, 2, h // 2, 2, w // 2, 2).mean(axis=(3, 5, 7))

    def back(g):
        gg = np.broadcast_to(g[:, :, :, None, :, None, :, None] / 8.0, (bsz, c, d // 2, 2, h // 2, 2, w // 2, 2))
        return (gg.reshape(bsz, c, d, h, w),)

    return _result(y, (x,), back)


def upsample_nearest(x: Tensor) -> Tensor:
    """2x nearest-neighbour upsampling."""
    bsz, c, d, h, w = x.shape
    y = np.broadcast_to(x.data[:, :, :, None, :, None, :, None], (bsz, c, d, 2, h, 2, w, 2))

    def back(g):
        return (g.reshape(bsz, c, d, 2, h, 2, w, 2).sum(axis=(3, 5, 7)),)

    return _result(y.reshape(bsz, c, 2 * d, 2 * h, 2 * w), (x,), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w.T + b over the last axis; ``w`` is (out, in)."""
    y = matmul(x, transpose(w, (1, 0)))
    return y if b is None else add(y, b)
