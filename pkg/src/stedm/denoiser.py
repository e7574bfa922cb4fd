"""Noise-estimation U-Net conditioned on a layout and a style vector.

The one-hot layout is concatenated to the noisy latent at the input. The
style vector goes through a two-layer MLP and is added to the bottleneck
feature map. When the style is ABSENT a learned null vector takes its place,
so the unconditional branch never sees zeros pretending to be a style.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import ConditionBundle
from .errors import ParameterError, ShapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 3
    base_channels: int = 32
    depth: int = 2
    time_embed_dim: int = 64
    style_dim: int = 128
    layout_classes: int = 2

    def __post_init__(self):
        if self.depth < 1:
            raise ParameterError("depth must be >= 1")
        for name, value in asdict(self).items():
            if value <= 0:
                raise ParameterError(f"{name} must be positive")


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _groups(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        c = config
        chans = [c.base_channels * (i + 1) for i in range(c.depth + 1)]
        self.time_mlp = nn.Sequential(
            nn.Linear(c.time_embed_dim, c.time_embed_dim), nn.SiLU(),
            nn.Linear(c.time_embed_dim, c.time_embed_dim))
        self.inp = nn.Conv2d(c.latent_channels + c.layout_classes, chans[0], 3, padding=1)
        self.down = nn.ModuleList(
            ResBlock(chans[i], chans[i + 1], c.time_embed_dim) for i in range(c.depth))
        self.mid1 = ResBlock(chans[-1], chans[-1], c.time_embed_dim)
        self.mid2 = ResBlock(chans[-1], chans[-1], c.time_embed_dim)
        self.style_mlp = nn.Sequential(
            nn.Linear(c.style_dim, chans[-1]), nn.SiLU(), nn.Linear(chans[-1], chans[-1]))
        self.style_emb = nn.Linear(c.style_dim, c.time_embed_dim)
        self.null_style = nn.Parameter(torch.randn(c.style_dim) * 0.5)
        self.up = nn.ModuleList(
            ResBlock(chans[i + 1] * 2, chans[i], c.time_embed_dim)
            for i in reversed(range(c.depth)))
        self.out_norm = nn.GroupNorm(_groups(chans[0]), chans[0])
        self.out = nn.Conv2d(chans[0], c.latent_channels, 3, padding=1)

    @property
    def downsample(self) -> int:
        return 2 ** self.config.depth

    def style_vectors(self, cond: ConditionBundle) -> torch.Tensor:
        b = cond.batch_size
        null = self.null_style.expand(b, -1)
        if cond.style is None:
            return null
        present = cond.present_mask()[:, None]
        return torch.where(present, cond.style, null)

    def forward(self, z: torch.Tensor, t: torch.Tensor, cond: ConditionBundle) -> torch.Tensor:
        if cond.layout.shape[-2:] != z.shape[-2:] or cond.layout.shape[0] != z.shape[0]:
            raise ShapeError(
                f"layout {tuple(cond.layout.shape)} does not match latent {tuple(z.shape)}")
        if cond.layout.shape[1] != self.config.layout_classes:
            raise ShapeError("layout class count does not match the model")
        if z.shape[-1] % self.downsample or z.shape[-2] % self.downsample:
            raise ShapeError(f"latent sides must be divisible by {self.downsample}")
        t = torch.as_tensor(t)
        if t.dim() == 0:
            t = t.expand(z.shape[0])
        emb = self.time_mlp(timestep_embedding(t, self.config.time_embed_dim).to(z.dtype))

        style = self.style_vectors(cond)
        # style also rides on the time embedding so every block sees it
        emb = emb + self.style_emb(style)

        h = self.inp(torch.cat([z, cond.layout.to(z.dtype)], dim=1))
        skips = []
        for block in self.down:
            h = block(h, emb)
            skips.append(h)
            h = F.avg_pool2d(h, 2)
        h = self.mid1(h, emb)
        h = h + self.style_mlp(style)[:, :, None, None]
        h = self.mid2(h, emb)
        for block in self.up:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
        return self.out(F.silu(self.out_norm(h)))


def init_denoiser(config: DenoiserConfig, seed: int) -> Denoiser:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Denoiser(config)
    model.num_params = sum(p.numel() for p in model.parameters())
    log.info("denoiser initialised with %d parameters", model.num_params)
    return model


def predict_noise(z_t: torch.Tensor, t, cond: ConditionBundle, model: Denoiser) -> torch.Tensor:
    """Functional alias for ``model(z_t, t, cond)``."""
    return model(z_t, t, cond)
