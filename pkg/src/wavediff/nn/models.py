"""3D U-Nets for noise prediction and detail regression."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from wavediff.nn import tensor as T
from wavediff.nn.layers import ConfigError, Conv3d, ConvBlock, Module, SelfAttention3d, TimeEmbedding
from wavediff.nn.tensor import Tensor


@dataclass(frozen=True)
class UNetConfig:
    """Architecture descriptor, stored verbatim in checkpoints."""

    kind: str = "denoiser"  # "denoiser" (time-conditioned) or "detail" (2x output head)
    widths: tuple[int, ...] = (16, 32, 32)
    time_dim: int = 32
    time_hidden: int = 64
    attention: bool = True
    head_blocks: int = 1  # extra conv blocks before the detail head output
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.kind not in ("denoiser", "detail"):
            raise ConfigError(f"unknown network kind {self.kind!r}")
        if len(self.widths) < 1 or min(self.widths) < 1:
            raise ConfigError("widths must be a non-empty list of positive ints")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


def subpixel_shuffle(x: Tensor) -> Tensor:
    """(batch, 8, d, h, w) -> (batch, 1, 2d, 2h, 2w); channel 4a + 2b + c fills child (a, b, c)."""
    b, _, d, h, w = x.shape
    y = T.reshape(x, (b, 2, 2, 2, d, h, w))
    y = T.transpose(y, (0, 4, 1, 5, 2, 6, 3))
    return T.reshape(y, (b, 1, 2 * d, 2 * h, 2 * w))


class UNet3D(Module):
    """Encoder of conv blocks and average pools, attention at the bottleneck,
    decoder of nearest upsampling, skip concatenation and conv blocks.

    Every convolution is 3x3x3 with stride 1. The ``detail`` kind ends in a
    sub-pixel head: the last conv emits eight channels per cell, one for each
    child voxel, so the output is twice the input resolution while every conv
    runs at the input resolution.
    """

    def __init__(self, config: UNetConfig = UNetConfig(), dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed)
        widths = config.widths
        cond = config.time_hidden if config.kind == "denoiser" else None
        self.time = TimeEmbedding(config.time_dim, config.time_hidden, rng, dtype) if cond else None
        self.stem = Conv3d(1, widths[0], rng, dtype)
        self.down = []
        cin = widths[0]
        for w in widths:
            self.down.append(ConvBlock(cin, w, rng, cond, dtype))
            cin = w
        self.attn = SelfAttention3d(widths[-1], rng, dtype) if config.attention else None
        self.up_conv = []
        self.up = []
        for w in reversed(widths[:-1]):
            self.up_conv.append(Conv3d(cin, w, rng, dtype))
            self.up.append(ConvBlock(2 * w, w, rng, cond, dtype))
            cin = w
        self.head = []
        if config.kind == "detail":
            self.head = [ConvBlock(cin, cin, rng, None, dtype) for _ in range(config.head_blocks)]
        # the detail head emits one channel per child voxel of each cell
        self.out = Conv3d(cin, 8 if config.kind == "detail" else 1, rng, dtype, zero=True)

    @property
    def min_resolution(self) -> int:
        return 2 ** (len(self.config.widths) - 1)

    def forward(self, x: Tensor, t=None) -> Tensor:
        """``x`` is (batch, 1, n, n, n); ``t`` one step per batch entry for the denoiser."""
        n = x.shape[-1]
        if x.ndim != 5 or x.shape[1] != 1:
            raise ValueError(f"expected (batch, 1, n, n, n) input, got {x.shape}")
        if n % self.min_resolution:
            raise ValueError(f"resolution {n} not divisible by {self.min_resolution}")
        cond = None
        if self.time is not None:
            if t is None:
                raise ValueError("denoiser needs time steps")
            t = np.broadcast_to(np.asarray(t), (x.shape[0],))
            cond = T.silu(self.time(t))
        h = T.silu(self.stem(x))
        skips = []
        for i, block in enumerate(self.down):
            if i > 0:
                h = T.avg_pool3d(h)
            h = block(h, cond)
            skips.append(h)
        if self.attn is not None:
            h = self.attn(h)
        for conv, block, skip in zip(self.up_conv, self.up, reversed(skips[:-1])):
            h = T.silu(conv(T.upsample_nearest(h)))
            h = block(T.concat([h, skip], axis=1), cond)
        for block in self.head:
            h = block(h)
        h = self.out(h)
        if self.config.kind == "detail":
            h = subpixel_shuffle(h)
        return h

    __call__ = forward

    def predict(self, volumes: np.ndarray, t=None) -> np.ndarray:
        """Inference on (batch, n, n, n) or (n, n, n) arrays; no graph is kept."""
        arr = np.asarray(volumes)
        single = arr.ndim == 3
        batch = arr[None] if single else arr
        with T.no_grad():
            out = self.forward(Tensor(batch[:, None].astype(self.dtype)), t).data[:, 0]
        out = out.astype(np.float64)
        return out[0] if single else out


class NetworkDenoiser:
    """Adapts a trained denoiser U-Net to the sampler's ``predict_eps`` protocol."""

    def __init__(self, net: UNet3D):
        self.net = net

    def predict_eps(self, x: np.ndarray, t: int) -> np.ndarray:
        return self.net.predict(x, t)
