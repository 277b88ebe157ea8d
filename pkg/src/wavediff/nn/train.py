"""Training loops for the noise predictor and the detail regressor."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from wavediff.diffusion import NoiseSchedule, Normalizer, build_schedule, rng_stream
from wavediff.nn import tensor as T
from wavediff.nn.checkpoint import Checkpoint
from wavediff.nn.models import UNet3D, UNetConfig
from wavediff.nn.optim import Adam
from wavediff.nn.tensor import Tensor

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    iters: int = 2000
    lr: float = 1e-4
    batch: int = 4
    seed: int = 0
    log_path: str | None = None
    checkpoint_path: str | None = None
    checkpoint_every: int = 0  # 0 disables intermediate checkpoints
    lr_decay: str = "none"  # "none" or "cosine" (anneal to zero over ``iters``)

    def __post_init__(self):
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")

    def lr_at(self, it: int) -> float:
        if self.lr_decay == "cosine":
            return self.lr * 0.5 * (1.0 + np.cos(np.pi * (it - 1) / self.iters))
        return self.lr


class _LossLog:
    def __init__(self, path):
        self.fh = None
        if path:
            self.fh = open(path, "w")
            self.fh.write("iter,loss\n")

    def write(self, it: int, loss: float):
        if self.fh:
            self.fh.write(f"{it},{loss:.9g}\n")

    def close(self):
        if self.fh:
            self.fh.close()


def _check_finite(loss: float, it: int, opt: Adam):
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss at iteration {it} (lr={opt.lr}, grad norm={opt.grad_norm():.4g})")


def _stack(volumes) -> np.ndarray:
    arrs = [np.asarray(getattr(v, "values", v), dtype=np.float64) for v in volumes]
    if not arrs:
        raise ValueError("empty dataset")
    shapes = {a.shape for a in arrs}
    if len(shapes) != 1:
        raise ValueError(f"dataset volumes differ in shape: {sorted(shapes)}")
    return np.stack(arrs)


def train_generator(dataset, cfg: TrainConfig = TrainConfig(), arch: UNetConfig = UNetConfig(),
                    sched: NoiseSchedule | None = None, history: list | None = None) -> Checkpoint:
    """Minimise the noise-prediction MSE on coarse volumes with Adam.

    The dataset is normalised with a scalar affine fitted here and stored in
    the checkpoint; samplers must invert it.
    """
    sched = sched or build_schedule()
    raw = _stack(dataset)
    norm = Normalizer.fit(raw)
    data = norm.apply(raw)
    net = UNet3D(arch)
    opt = Adam(net.parameters(), lr=cfg.lr)
    rng = rng_stream(cfg.seed, 1)
    sqrt_ab = np.sqrt(sched.alpha_bar)
    sqrt_1mab = np.sqrt(1.0 - sched.alpha_bar)
    out = _LossLog(cfg.log_path)
    try:
        for it in range(1, cfg.iters + 1):
            idx = rng.integers(0, len(data), cfg.batch)
            ts = rng.integers(1, sched.T + 1, cfg.batch)
            eps = rng.standard_normal((cfg.batch,) + data.shape[1:])
            shape = (-1, 1, 1, 1)
            ct = sqrt_ab[ts].reshape(shape) * data[idx] + sqrt_1mab[ts].reshape(shape) * eps
            opt.zero_grad()
            pred = net(Tensor(ct[:, None].astype(np.float32)), ts)
            loss = T.mse_loss(pred, eps[:, None])
            loss.backward()
            value = float(loss.data)
            _check_finite(value, it, opt)
            opt.lr = cfg.lr_at(it)
            opt.step()
            out.write(it, value)
            if history is not None:
                history.append(value)
            if cfg.checkpoint_every and cfg.checkpoint_path and it % cfg.checkpoint_every == 0:
                Checkpoint.from_training(net, opt, norm, meta={"iters": it}).save(cfg.checkpoint_path)
    finally:
        out.close()
    ckpt = Checkpoint.from_training(net, opt, norm, meta={"iters": cfg.iters, "T": sched.T})
    if cfg.checkpoint_path:
        ckpt.save(cfg.checkpoint_path)
    return ckpt


def train_detail(pairs, cfg: TrainConfig = TrainConfig(), arch: UNetConfig = UNetConfig(kind="detail"),
                 history: list | None = None) -> Checkpoint:
    """Regress detail volumes from coarse volumes by MSE with Adam.

    ``pairs`` is a sequence of WaveletPair (or (coarse, detail) array tuples).
    Inputs and targets get separate scalar normalisations.
    """
    if arch.kind != "detail":
        raise ValueError("detail training needs a 'detail' architecture")
    coarse = _stack([p.coarse if hasattr(p, "coarse") else p[0] for p in pairs])
    detail = _stack([p.detail if hasattr(p, "detail") else p[1] for p in pairs])
    if detail.shape[1] != 2 * coarse.shape[1]:
        raise ValueError("detail volumes must have twice the coarse resolution")
    in_norm, out_norm = Normalizer.fit(coarse), Normalizer.fit(detail)
    x_all, y_all = in_norm.apply(coarse), out_norm.apply(detail)
    net = UNet3D(arch)
    opt = Adam(net.parameters(), lr=cfg.lr)
    rng = rng_stream(cfg.seed, 2)
    out = _LossLog(cfg.log_path)
    batch = min(cfg.batch, len(x_all))
    try:
        for it in range(1, cfg.iters + 1):
            idx = rng.choice(len(x_all), batch, replace=False) if batch < len(x_all) else np.arange(batch)
            opt.zero_grad()
            pred = net(Tensor(x_all[idx][:, None].astype(np.float32)))
            loss = T.mse_loss(pred, y_all[idx][:, None])
            loss.backward()
            value = float(loss.data)
            _check_finite(value, it, opt)
            opt.lr = cfg.lr_at(it)
            opt.step()
            out.write(it, value)
            if history is not None:
                history.append(value)
            if cfg.checkpoint_every and cfg.checkpoint_path and it % cfg.checkpoint_every == 0:
                Checkpoint.from_training(net, opt, in_norm, out_norm, {"iters": it}).save(cfg.checkpoint_path)
    finally:
        out.close()
    ckpt = Checkpoint.from_training(net, opt, in_norm, out_norm, {"iters": cfg.iters})
    if cfg.checkpoint_path:
        ckpt.save(cfg.checkpoint_path)
    return ckpt


def predict_detail(ckpt: Checkpoint, coarse: np.ndarray, net: UNet3D | None = None) -> np.ndarray:
    """Detail volume(s) in data units for raw coarse volume(s)."""
    net = net or ckpt.build_network()
    return ckpt.output_norm.invert(net.predict(ckpt.input_norm.apply(coarse)))


def write_loss_history(path, history):
    Path(path).write_text("iter,loss\n" + "".join(f"{i},{v:.9g}\n" for i, v in enumerate(history, 1)))
