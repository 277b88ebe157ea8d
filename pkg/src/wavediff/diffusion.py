"""Noise schedules, forward corruption, the noise-prediction loss and reverse samplers.

All schedule tables are indexed by the step t in 1..T; index 0 holds the
t = 0 convention (alpha_bar_0 = 1, sigma_0 = 0) so that ``alpha_bar[t - 1]``
is valid at t = 1.

Random numbers come from Philox streams keyed by (seed, sample index, step).
Step key 0 draws the initial noise volume, key t >= 1 the noise injected
when leaving step t, so every chain and every step is reproducible in
isolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from wavediff.volume import InvalidConfigError, InvalidInputError


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent counter-based generator for ``(seed, *keys)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise InvalidConfigError("schedule needs T >= 2")
    if not 0 < beta_start < beta_end < 1:
        raise InvalidConfigError("need 0 < beta_start < beta_end < 1")
    t = np.arange(1, T + 1)
    beta = np.concatenate([[0.0], beta_start + (t - 1) * (beta_end - beta_start) / (T - 1)])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    var = np.zeros(T + 1)
    var[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    for arr in (beta, alpha, alpha_bar, var):
        arr.flags.writeable = False
    sigma = np.sqrt(var)
    sigma.flags.writeable = False
    return NoiseSchedule(T, beta, alpha, alpha_bar, sigma)


class Denoiser(Protocol):
    def predict_eps(self, x: np.ndarray, t: int) -> np.ndarray:
        """Noise estimate with the same shape as ``x`` (one volume or a batch)."""


def _check_step(sched: NoiseSchedule, t: int):
    if not 1 <= t <= sched.T:
        raise InvalidInputError(f"step {t} outside [1, {sched.T}]")


def forward_corrupt(c0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    c0 = np.asarray(c0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if c0.shape != eps.shape:
        raise InvalidInputError(f"noise shape {eps.shape} does not match volume {c0.shape}")
    _check_step(sched, t)
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * c0 + np.sqrt(1.0 - ab) * eps


def forward_step(c_prev: np.ndarray, t: int, noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """One Markov forward transition q(C_t | C_{t-1})."""
    b = sched.beta[t]
    return np.sqrt(1.0 - b) * c_prev + np.sqrt(b) * noise


@dataclass
class LossSample:
    loss: float
    t: int
    eps: np.ndarray
    corrupted: np.ndarray
    prediction: np.ndarray
    grad_prediction: np.ndarray = field(repr=False)


def training_loss(denoiser, c0: np.ndarray, rng: np.random.Generator, sched: NoiseSchedule) -> LossSample:
    """Draw t and eps, corrupt c0 and score the noise prediction by its voxel-mean squared error.

    ``grad_prediction`` is d(loss)/d(prediction), the signal a trainable
    denoiser back-propagates.
    """
    t = int(rng.integers(1, sched.T + 1))
    eps = rng.standard_normal(np.shape(c0))
    ct = forward_corrupt(c0, t, eps, sched)
    pred = np.asarray(denoiser.predict_eps(ct, t), dtype=np.float64)
    diff = pred - eps
    return LossSample(float(np.mean(diff**2)), t, eps, ct, pred, 2.0 * diff / diff.size)


def ddpm_step(ct: np.ndarray, t: int, denoiser, sched: NoiseSchedule, noise: np.ndarray | None = None,
              eps: np.ndarray | None = None) -> np.ndarray:
    """Ancestral update C_t -> C_{t-1}; no noise is added at t = 1."""
    _check_step(sched, t)
    if eps is None:
        eps = denoiser.predict_eps(ct, t)
    coef = sched.beta[t] / np.sqrt(1.0 - sched.alpha_bar[t])
    mean = (ct - coef * eps) / np.sqrt(sched.alpha[t])
    if t > 1 and noise is not None:
        mean = mean + sched.sigma[t] * noise
    return mean


def ddim_step(ct: np.ndarray, t: int, t_prev: int, denoiser, sched: NoiseSchedule,
              eps: np.ndarray | None = None) -> np.ndarray:
    """Deterministic (eta = 0) jump from step t to an earlier step t_prev (0 means data)."""
    _check_step(sched, t)
    if eps is None:
        eps = denoiser.predict_eps(ct, t)
    ab, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t_prev]
    x0 = (ct - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
    return np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps


def sampling_steps(T: int, subsample_factor: int = 1) -> np.ndarray:
    """Visited steps in decreasing order, from T down to 1."""
    if subsample_factor < 1:
        raise InvalidConfigError("subsample factor must be >= 1")
    if subsample_factor == 1:
        return np.arange(T, 0, -1)
    count = max(2, int(round(T / subsample_factor)))
    steps = np.unique(np.round(np.linspace(1, T, count)).astype(np.int64))[::-1]
    return steps


@dataclass
class SampleTrace:
    seed: int
    sample_index: int
    steps_used: list[int]
    final: np.ndarray
    intermediates: list[np.ndarray] | None = None


def sample(denoiser, sched: NoiseSchedule, resolution: int, subsample_factor: int = 1, seed: int = 0,
           sample_index: int = 0, record: bool = False) -> SampleTrace:
    return sample_many(denoiser, sched, resolution, subsample_factor, seed, [sample_index], record)[0]


def sample_many(denoiser, sched: NoiseSchedule, resolution: int, subsample_factor: int = 1, seed: int = 0,
                sample_indices=(0,), record: bool = False) -> list[SampleTrace]:
    """Run independent reverse chains as one batch.

    With ``subsample_factor == 1`` every ancestral step is taken; otherwise
    the deterministic accelerated update visits the evenly spaced subset from
    :func:`sampling_steps`. The denoiser is called once per visited step with
    the (chains, N, N, N) batch.
    """
    indices = [int(i) for i in sample_indices]
    shape = (resolution,) * 3
    x = np.stack([rng_stream(seed, i, 0).standard_normal(shape) for i in indices])
    steps = sampling_steps(sched.T, subsample_factor)
    history: list[np.ndarray] = [x.copy()] if record else []
    for k, t in enumerate(steps):
        t = int(t)
        eps = np.asarray(denoiser.predict_eps(x, t), dtype=np.float64)
        if eps.shape != x.shape:
            raise InvalidInputError(f"denoiser returned shape {eps.shape}, expected {x.shape}")
        if subsample_factor == 1:
            noise = None
            if t > 1:
                noise = np.stack([rng_stream(seed, i, t).standard_normal(shape) for i in indices])
            x = ddpm_step(x, t, denoiser, sched, noise, eps=eps)
        else:
            t_prev = int(steps[k + 1]) if k + 1 < len(steps) else 0
            x = ddim_step(x, t, t_prev, denoiser, sched, eps=eps)
        if record:
            history.append(x.copy())
    visited = [int(t) for t in steps]
    traces = []
    for j, i in enumerate(indices):
        inter = [h[j] for h in history] if record else None
        traces.append(SampleTrace(seed, i, visited, x[j], inter))
    return traces


class GaussianOracle:
    """Exact noise predictor for data distributed i.i.d. N(mean, std^2) per voxel.

    E[eps | C_t] for jointly Gaussian (C_0, eps); minimises the training loss
    over all predictors, so the samplers should reproduce the data moments.
    ``mean`` may also be a volume, giving a per-voxel mean around one shape.
    """

    def __init__(self, mean, std: float, sched: NoiseSchedule):
        self.mean = mean if np.isscalar(mean) else np.asarray(mean, dtype=np.float64)
        self.std = float(std)
        self.sched = sched
        self.calls = 0

    def predict_eps(self, x: np.ndarray, t: int) -> np.ndarray:
        self.calls += 1
        ab = self.sched.alpha_bar[t]
        return np.sqrt(1.0 - ab) * (x - np.sqrt(ab) * self.mean) / (ab * self.std**2 + 1.0 - ab)


@dataclass(frozen=True)
class Normalizer:
    """Scalar affine map fitted on a dataset: (x - mean) / std."""

    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, volumes) -> "Normalizer":
        stacked = np.stack([np.asarray(v, dtype=np.float64) for v in volumes])
        std = float(stacked.std())
        return cls(float(stacked.mean()), std if std > 0 else 1.0)

    def apply(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def invert(self, x):
        return np.asarray(x) * self.std + self.mean
