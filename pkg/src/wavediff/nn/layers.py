"""Parameterised layers built on :mod:`wavediff.nn.tensor`."""

from __future__ import annotations

import math

import numpy as np

from wavediff.nn import tensor as T
from wavediff.nn.tensor import Tensor


class ConfigError(ValueError):
    pass


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    def set_flat(self, flat: np.ndarray):
        flat = np.asarray(flat)
        expected = self.num_parameters()
        if flat.size != expected:
            raise ValueError(f"parameter vector has {flat.size} entries, architecture needs {expected}")
        pos = 0
        for p in self.parameters():
            n = p.data.size
            p.data = flat[pos : pos + n].reshape(p.shape).astype(p.dtype)
            pos += n


def _param(shape, rng: np.random.Generator | None, scale: float, dtype) -> Tensor:
    if rng is None or scale == 0.0:
        data = np.zeros(shape, dtype=dtype)
    else:
        data = (rng.standard_normal(shape) * scale).astype(dtype)
    return Tensor(data, requires_grad=True)


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, rng, dtype=np.float32, zero: bool = False):
        fan_in = cin * 27
        self.weight = _param((cout, cin, 3, 3, 3), None if zero else rng, math.sqrt(2.0 / fan_in), dtype)
        self.bias = _param((cout,), None, 0.0, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv3d(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng, dtype=np.float32, zero: bool = False):
        self.weight = _param((fout, fin), None if zero else rng, math.sqrt(1.0 / fin), dtype)
        self.bias = _param((fout,), None, 0.0, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


def sinusoidal_encoding(t, dim: int) -> np.ndarray:
    """Transformer-style position encoding of integer steps, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = t[:, None] * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class TimeEmbedding(Module):
    """Sinusoidal encoding of t followed by two fully connected layers."""

    def __init__(self, dim: int, hidden: int, rng, dtype=np.float32):
        self.dim = dim
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, hidden, rng, dtype)
        self.dtype = dtype

    def __call__(self, t) -> Tensor:
        enc = Tensor(sinusoidal_encoding(t, self.dim).astype(self.dtype))
        return self.fc2(T.silu(self.fc1(enc)))


class SelfAttention3d(Module):
    """Single-head scaled dot-product attention over flattened voxels, plus residual.

    The value projection starts at zero so the block is the identity at init.
    """

    max_positions = 8**3

    def __init__(self, channels: int, rng, dtype=np.float32):
        self.q = Linear(channels, channels, rng, dtype)
        self.k = Linear(channels, channels, rng, dtype)
        self.v = Linear(channels, channels, rng, dtype, zero=True)
        self.out = Linear(channels, channels, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        b, c, d, h, w = x.shape
        n = d * h * w
        if n > self.max_positions:
            raise ConfigError(
                f"attention bottleneck has {n} positions (> {self.max_positions}); add an encoder stage"
            )
        seq = T.transpose(T.reshape(x, (b, c, n)), (0, 2, 1))  # (b, n, c)
        q, k, v = self.q(seq), self.k(seq), self.v(seq)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(c))
        attn = T.softmax(scores, axis=-1)
        mixed = self.out(T.matmul(attn, v))
        back = T.reshape(T.transpose(mixed, (0, 2, 1)), (b, c, d, h, w))
        return T.add(x, back)


class ConvBlock(Module):
    """conv -> SiLU (+ per-channel conditioning) -> conv -> SiLU, residual around the second conv."""

    def __init__(self, cin: int, cout: int, rng, cond_dim: int | None = None, dtype=np.float32):
        self.conv1 = Conv3d(cin, cout, rng, dtype)
        self.conv2 = Conv3d(cout, cout, rng, dtype)
        self.cond = Linear(cond_dim, cout, rng, dtype) if cond_dim else None

    def __call__(self, x: Tensor, cond: Tensor | None = None) -> Tensor:
        h = T.silu(self.conv1(x))
        if self.cond is not None and cond is not None:
            bias = self.cond(cond)  # (batch, cout)
            h = T.add(h, T.reshape(bias, bias.shape + (1, 1, 1)))
        return T.add(h, T.silu(self.conv2(h)))
