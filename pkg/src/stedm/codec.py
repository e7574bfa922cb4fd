"""Latent codecs and layout downsampling to the latent grid.

Codecs work on batched ``(N, C, H, W)`` tensors in [-1, 1].
"""

from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError, ParameterError, ShapeError

log = logging.getLogger(__name__)


class IdentityCodec:
    factor = 1

    def __init__(self, channels: int = 3):
        self.latent_channels = channels

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return x

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return z


def identity_codec(channels: int = 3) -> IdentityCodec:
    """Pixel-space codec with ``f = 1``."""
    return IdentityCodec(channels)


class _AE(nn.Module):
    def __init__(self, factor: int, latent_channels: int, in_channels: int = 3, width: int = 32):
        super().__init__()
        n = int(np.log2(factor))
        enc = [nn.Conv2d(in_channels, width, 3, padding=1), nn.SiLU()]
        for _ in range(n):
            enc += [nn.Conv2d(width, width, 3, stride=2, padding=1), nn.SiLU()]
        enc += [nn.Conv2d(width, latent_channels, 3, padding=1)]
        dec = [nn.Conv2d(latent_channels, width, 3, padding=1), nn.SiLU()]
        for _ in range(n):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(width, width, 3, padding=1), nn.SiLU()]
        dec += [nn.Conv2d(width, in_channels, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)
        self.decoder = nn.Sequential(*dec)


class AutoencoderCodec:
    """Continuous conv autoencoder. Immutable after training."""

    def __init__(self, net: _AE, factor: int, latent_channels: int, history=None):
        self.net = net.eval()
        self.factor = factor
        self.latent_channels = latent_channels
        self.history = list(history or [])

    def _check(self, x: torch.Tensor):
        if x.shape[-1] % self.factor or x.shape[-2] % self.factor:
            raise ShapeError(f"image sides {tuple(x.shape[-2:])} not divisible by {self.factor}")

    @torch.no_grad()
    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        return self.net.encoder(x)

    @torch.no_grad()
    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.net.decoder(z).clamp(-1, 1)

    def state_dict(self) -> dict:
        return self.net.state_dict()


def _heldout_mse(net: _AE, x: torch.Tensor) -> float:
    with torch.no_grad():
        return float(F.mse_loss(net.decoder(net.encoder(x)), x))


def train_autoencoder(images: np.ndarray, f: int = 4, epochs: int = 5, seed: int = 0,
                      latent_channels: int = 4, batch_size: int = 32,
                      lr: float = 1e-3) -> AutoencoderCodec:
    """Fit a small AE on ``(N, H, W, C)`` images.

    ``history`` on the result holds the held-out MSE before training and
    after every epoch.
    """
    if f not in (2, 4):
        raise ParameterError(f"factor must be 2 or 4, got {f}")
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or len(images) == 0:
        raise DataError("need a non-empty (N, H, W, C) image stack")
    n, h, w, c = images.shape
    if h % f or w % f:
        raise ShapeError(f"image sides {h}x{w} not divisible by {f}")

    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_val = max(1, n // 10) if n > 1 else 0
    x = torch.from_numpy(images).permute(0, 3, 1, 2).contiguous()
    val, train = x[order[:n_val]], x[order[n_val:]]
    if n_val == 0:
        val = train

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = _AE(f, latent_channels, in_channels=c)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    history = [_heldout_mse(net, val)]
    for epoch in range(epochs):
        perm = rng.permutation(len(train))
        net.train()
        for i in range(0, len(train), batch_size):
            xb = train[perm[i:i + batch_size]]
            loss = F.mse_loss(net.decoder(net.encoder(xb)), xb)
            opt.zero_grad()
            loss.backward()
            opt.step()
        history.append(_heldout_mse(net, val))
        log.info("autoencoder epoch %d held-out mse %.5f", epoch + 1, history[-1])
    return AutoencoderCodec(net, f, latent_channels, history)


def downsample_layout(mask: np.ndarray, f: int, K: int) -> np.ndarray:
    """Majority vote per ``f x f`` block, ties to the lowest class; one-hot ``(h, w, K)``.

    Also accepts a batch ``(N, H, W)``, returning ``(N, h, w, K)``.
    """
    mask = np.asarray(mask)
    if mask.ndim not in (2, 3):
        raise ShapeError("mask must be (H, W) or (N, H, W)")
    H, W = mask.shape[-2:]
    if H % f or W % f:
        raise ShapeError(f"mask sides {H}x{W} not divisible by {f}")
    if mask.size and (mask.min() < 0 or mask.max() >= K or not np.all(mask == np.round(mask))):
        raise DataError(f"mask values must be integers in [0, {K - 1}]")
    m = mask.astype(np.int64)
    onehot = np.eye(K, dtype=np.int64)[m]  # (..., H, W, K)
    lead = m.shape[:-2]
    blocks = onehot.reshape(lead + (H // f, f, W // f, f, K)).sum(axis=(-4, -2))
    winner = np.argmax(blocks, axis=-1)  # first max wins -> lowest index
    return np.eye(K, dtype=np.float32)[winner]
