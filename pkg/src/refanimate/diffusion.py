"""Noise schedule, forward diffusion, epsilon objective and DDIM sampling.

Timesteps run 1..T; index 0 denotes the clean latent (alpha_bar = 1).
Schedule arithmetic stays in float64 and is cast to the latent dtype last.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidArgument

# SD-conventional defaults
DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
PAPER_DDIM_STEPS = 20


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    T: int
    betas: np.ndarray        # betas[t - 1] is beta_t
    kind: str = "linear"
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        """alpha_bars[t] for t = 0..T, with alpha_bars[0] = 1."""
        return np.concatenate([[1.0], np.cumprod(self.alphas)])

    def alpha_bar(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise InvalidArgument(f"timestep outside [0, {self.T}]: {t}")
        return self.alpha_bars[t]

    def to_json(self) -> dict:
        return {"T": self.T, "kind": self.kind, "beta_start": self.beta_start,
                "beta_end": self.beta_end}


def build_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                   beta_end: float = DEFAULT_BETA_END, kind: str = "linear") -> DiffusionSchedule:
    if T < 1:
        raise InvalidArgument(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise InvalidArgument(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    if kind != "linear":
        raise InvalidArgument(f"unsupported schedule kind {kind!r}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return DiffusionSchedule(T=T, betas=betas, kind=kind, beta_start=beta_start, beta_end=beta_end)


def _per_sample(coef: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    c = torch.as_tensor(np.atleast_1d(coef), dtype=torch.float64)
    if c.numel() == 1:
        return c.reshape(()).to(like.dtype)
    return c.view(-1, *([1] * (like.ndim - 1))).to(like.dtype)


def q_sample_alpha_bar(z0, alpha_bar, eps):
    """sqrt(ab) z0 + sqrt(1 - ab) eps for an explicit alpha_bar value(s)."""
    ab = np.asarray(alpha_bar, dtype=np.float64)
    return _per_sample(np.sqrt(ab), z0) * z0 + _per_sample(np.sqrt(1.0 - ab), z0) * eps


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """Closed-form forward diffusion; ``t`` is an int or one int per leading-batch item."""
    if z0.shape != eps.shape:
        raise InvalidArgument(f"z0 {tuple(z0.shape)} and eps {tuple(eps.shape)} differ")
    t = t.cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
    return q_sample_alpha_bar(z0, schedule.alpha_bar(t), eps)


def training_loss(z0: torch.Tensor, conditioning, model, schedule: DiffusionSchedule,
                  generator: torch.Generator | None = None, t=None, eps=None) -> torch.Tensor:
    """E ||eps - model(z_t, t, conditioning)||^2 with mean reduction.

    ``t`` is drawn uniformly from 1..T per sample and ``eps`` from N(0, I)
    unless given explicitly.
    """
    b = z0.shape[0]
    if t is None:
        t = torch.randint(1, schedule.T + 1, (b,), generator=generator)
    if eps is None:
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = q_sample(z0, t, eps, schedule)
    pred = model(z_t, t, conditioning)
    return (eps - pred).pow(2).mean()


@dataclass
class SamplerConfig:
    num_steps: int = PAPER_DDIM_STEPS
    eta: float = 0.0
    seed: int = 0

    def validate(self, T: int | None = None):
        if self.num_steps < 1 or (T is not None and self.num_steps > T):
            raise InvalidArgument(f"num_steps must be in [1, T], got {self.num_steps}")
        if self.eta < 0:
            raise InvalidArgument(f"eta must be >= 0, got {self.eta}")
        return self


def ddim_timesteps(T: int, num_steps: int) -> np.ndarray:
    """Descending, uniformly strided timesteps covering [1, T]."""
    if not 1 <= num_steps <= T:
        raise InvalidArgument(f"num_steps must be in [1, {T}], got {num_steps}")
    if num_steps == 1:
        return np.array([T])
    return np.round(np.linspace(T, 1, num_steps)).astype(np.int64)


def ddim_step(z, eps, ab: float, ab_prev: float, eta: float = 0.0, noise=None):
    """One DDIM update from alpha_bar ``ab`` to ``ab_prev`` (python floats)."""
    x0 = (z - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
    sigma = 0.0
    if eta > 0:
        sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab)) * math.sqrt(1.0 - ab / ab_prev)
    direction = math.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0))
    out = math.sqrt(ab_prev) * x0 + direction * eps
    if sigma > 0:
        out = out + sigma * noise
    return out


@torch.no_grad()
def ddim_sample(model, conditioning, sampler_config: SamplerConfig, schedule: DiffusionSchedule,
                latent_shape, z_T: torch.Tensor | None = None, dtype=torch.float32,
                callback=None) -> torch.Tensor:
    """Deterministic (eta = 0) or stochastic DDIM from z_T ~ N(0, I) down to z_0.

    ``model(z_t, t, conditioning)`` returns the predicted noise; ``t`` is a
    (b,) long tensor where b = latent_shape[0].
    """
    sampler_config.validate(schedule.T)
    gen = torch.Generator().manual_seed(sampler_config.seed)
    z = torch.randn(tuple(latent_shape), generator=gen, dtype=dtype) if z_T is None else z_T.clone()
    ts = ddim_timesteps(schedule.T, sampler_config.num_steps)
    abars = schedule.alpha_bars
    b = z.shape[0]
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        eps = model(z, torch.full((b,), int(t), dtype=torch.long), conditioning)
        noise = None
        if sampler_config.eta > 0:
            noise = torch.randn(z.shape, generator=gen, dtype=z.dtype)
        z = ddim_step(z, eps, float(abars[t]), float(abars[t_prev]), sampler_config.eta, noise)
        if callback is not None:
            callback(i, int(t), z)
    return z
