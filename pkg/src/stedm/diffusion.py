"""Noise schedules, forward diffusion, losses and deterministic DDIM sampling.

Step indices follow the 1-based convention: ``t`` runs over ``1..T`` and
``t = 0`` denotes clean data with ``alpha_bar(0) = 1``.

    x_t = sqrt(abar_t) * x_0 + sqrt(1 - abar_t) * eps

DDIM (eta = 0) update from ``t`` to ``t_prev``:

    x0_hat = (x_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t)
    x_prev = sqrt(abar_prev) * x0_hat + sqrt(1 - abar_prev) * eps_hat
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional

import numpy as np
import torch

from .errors import ParameterError, ShapeError

__all__ = [
    "ConditionBundle",
    "NoiseSchedule",
    "build_schedule",
    "forward_diffuse",
    "diffusion_loss",
    "cfg_combine",
    "ddim_step",
    "ddim_timesteps",
    "ddim_generate",
]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t):
        """abar at step(s) ``t`` with ``abar(0) = 1``. Accepts int or int tensor."""
        table = self.table
        if isinstance(t, torch.Tensor):
            if t.min() < 0 or t.max() > self.T:
                raise IndexError(f"step out of range [0, {self.T}]")
            return table[t.long()]
        if not 0 <= int(t) <= self.T:
            raise IndexError(f"step {t} out of range [0, {self.T}]")
        return table[int(t)]

    @cached_property
    def table(self) -> torch.Tensor:
        # float32 copy of [1, abar_1, ..., abar_T]
        ext = np.concatenate([[1.0], self.alpha_bars])
        return torch.as_tensor(ext, dtype=torch.float32)


@dataclass
class ConditionBundle:
    """Layout plus optional style for a batch.

    ``layout`` is one-hot ``(B, K, h, w)``. ``style`` is ``(B, d)`` or None
    (style ABSENT for the whole batch). ``style_present`` optionally marks
    per-row presence; rows marked False are ABSENT regardless of their values.
    """

    layout: torch.Tensor
    style: Optional[torch.Tensor] = None
    style_present: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.layout.dim() != 4:
            raise ShapeError("layout must be (B, K, h, w)")
        sums = self.layout.sum(dim=1)
        if not torch.allclose(sums, torch.ones_like(sums)):
            raise ShapeError("layout is not one-hot over the class axis")
        if self.style is not None:
            if self.style.dim() != 2 or self.style.shape[0] != self.layout.shape[0]:
                raise ShapeError("style must be (B, d) matching the layout batch")
            if not torch.isfinite(self.style).all():
                raise ShapeError("style vector has non-finite entries")
        if self.style_present is not None and self.style is None:
            raise ShapeError("style_present given without style")

    @property
    def batch_size(self) -> int:
        return self.layout.shape[0]

    def present_mask(self) -> torch.Tensor:
        b = self.batch_size
        if self.style is None:
            return torch.zeros(b, dtype=torch.bool)
        if self.style_present is None:
            return torch.ones(b, dtype=torch.bool)
        return self.style_present.bool()

    def without_style(self) -> "ConditionBundle":
        return ConditionBundle(self.layout)


def build_schedule(T: int = 1000, kind: str = "linear", beta_start: float = 1e-4,
                   beta_end: float = 0.02) -> NoiseSchedule:
    """Build a beta schedule. The cosine kind ignores ``beta_start``/``beta_end``."""
    if int(T) != T or T < 1:
        raise ParameterError(f"T must be a positive integer, got {T}")
    T = int(T)
    if kind == "linear":
        if not 0 < beta_start <= beta_end < 1:
            raise ParameterError(
                f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1 - f[1:] / f[:-1], 1e-8, 0.999)
    else:
        raise ParameterError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _bcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return v.reshape(v.shape + (1,) * (like.dim() - v.dim()))


def forward_diffuse(x0: torch.Tensor, t, eps: torch.Tensor,
                    sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form q(x_t | x_0) sample. ``t`` is an int or a per-batch int tensor."""
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ")
    tt = torch.as_tensor(t)
    if tt.min() < 1 or tt.max() > sched.T:
        raise IndexError(f"t must lie in [1, {sched.T}]")
    ab = sched.alpha_bar(tt).to(x0.dtype)
    if tt.dim():
        ab = _bcast(ab, x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def diffusion_loss(pred_eps: torch.Tensor, true_eps: torch.Tensor) -> torch.Tensor:
    if pred_eps.shape != true_eps.shape:
        raise ShapeError(f"shapes differ: {tuple(pred_eps.shape)} vs {tuple(true_eps.shape)}")
    return ((pred_eps - true_eps) ** 2).mean()


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    if eps_uncond.shape != eps_cond.shape:
        raise ShapeError("conditional and unconditional estimates differ in shape")
    if scale < 0:
        raise ParameterError("guidance scale must be >= 0")
    # convex-combination form: exact at scale 0 and 1
    return (1.0 - scale) * eps_uncond + scale * eps_cond


def ddim_step(x_t: torch.Tensor, pred_eps: torch.Tensor, t: int, t_prev: int,
              sched: NoiseSchedule, clip: Optional[tuple] = None) -> torch.Tensor:
    """One deterministic update. With ``clip=(lo, hi)`` the clean estimate is
    clamped to that range and the noise estimate re-derived from it, which
    keeps pixel-space samples from drifting when the denoiser is unsure."""
    if not (0 <= t_prev < t <= sched.T):
        raise IndexError(f"need 0 <= t_prev < t <= {sched.T}, got t={t}, t_prev={t_prev}")
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t_prev)
    x0_hat = (x_t - (1 - ab_t).sqrt() * pred_eps) / ab_t.sqrt()
    if clip is not None:
        x0_hat = x0_hat.clamp(*clip)
        pred_eps = (x_t - ab_t.sqrt() * x0_hat) / (1 - ab_t).sqrt()
    if t_prev == 0:
        return x0_hat
    return ab_prev.sqrt() * x0_hat + (1 - ab_prev).sqrt() * pred_eps


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced descending steps from ``T`` to ``0``, both endpoints included."""
    if not 1 <= steps <= T:
        raise ParameterError(f"steps must lie in [1, {T}], got {steps}")
    seq = np.rint(np.linspace(T, 0, steps + 1)).astype(int)
    return [int(s) for s in seq]


Denoiser = Callable[[torch.Tensor, torch.Tensor, ConditionBundle], torch.Tensor]


@torch.no_grad()
def ddim_generate(denoiser: Denoiser, cond: ConditionBundle, steps: int, scale: float,
                  seed: int, sched: NoiseSchedule, channels: int = 3,
                  x_T: Optional[torch.Tensor] = None, clip_x0: Optional[tuple] = None) -> torch.Tensor:
    """Guided deterministic sampling on the latent grid of ``cond.layout``.

    The denoiser is called twice per step: with ``cond`` and with the style
    ABSENT; the two estimates are merged by :func:`cfg_combine`.
    """
    b, _, h, w = cond.layout.shape
    seq = ddim_timesteps(sched.T, steps)
    if x_T is None:
        gen = torch.Generator().manual_seed(int(seed))
        x = torch.randn((b, channels, h, w), generator=gen)
    else:
        x = x_T.clone()
    uncond = cond.without_style()
    for t, t_prev in zip(seq[:-1], seq[1:]):
        tt = torch.full((b,), t, dtype=torch.long)
        eps_c = denoiser(x, tt, cond)
        eps_u = denoiser(x, tt, uncond)
        x = ddim_step(x, cfg_combine(eps_u, eps_c, scale), t, t_prev, sched, clip_x0)
    return x
