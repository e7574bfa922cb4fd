"""Binary segmentation U-Net and the weighted CE + Dice loss."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

DICE_EPS = 1e-6


def _block(i, o):
    return nn.Sequential(
        nn.Conv2d(i, o, 3, padding=1), nn.BatchNorm2d(o), nn.ReLU(inplace=True),
        nn.Conv2d(o, o, 3, padding=1), nn.BatchNorm2d(o), nn.ReLU(inplace=True))


class SegUNet(nn.Module):
    """Plain U-Net: ``(N, 3, H, W)`` -> ``(N, 2, H, W)`` logits."""

    def __init__(self, depth: int = 4, base_channels: int = 32, in_channels: int = 3,
                 classes: int = 2):
        super().__init__()
        self.depth = depth
        chans = [base_channels * 2 ** i for i in range(depth + 1)]
        self.enc = nn.ModuleList([_block(in_channels, chans[0])] +
                                 [_block(chans[i], chans[i + 1]) for i in range(depth)])
        self.upconv = nn.ModuleList(
            nn.ConvTranspose2d(chans[i + 1], chans[i], 2, stride=2) for i in reversed(range(depth)))
        self.dec = nn.ModuleList(_block(chans[i] * 2, chans[i]) for i in reversed(range(depth)))
        self.head = nn.Conv2d(chans[0], classes, 1)

    def forward(self, x):
        f = 2 ** self.depth
        if x.shape[-1] % f or x.shape[-2] % f:
            raise ShapeError(f"input sides {tuple(x.shape[-2:])} must be divisible by {f}")
        skips = []
        h = x
        for i, block in enumerate(self.enc):
            h = block(h)
            if i < self.depth:
                skips.append(h)
                h = F.max_pool2d(h, 2)
        for up, block in zip(self.upconv, self.dec):
            h = block(torch.cat([up(h), skips.pop()], dim=1))
        return self.head(h)


def seg_forward(model: SegUNet, image) -> torch.Tensor:
    """Per-pixel class probabilities.

    A single ``H x W x 3`` array gives ``H x W x 2``; an ``(N, 3, H, W)``
    tensor gives ``(N, 2, H, W)``.
    """
    if isinstance(image, torch.Tensor) and image.dim() == 4:
        return torch.softmax(model(image), dim=1)
    arr = torch.as_tensor(np.asarray(image, np.float32))
    if arr.dim() != 3:
        raise ShapeError("expected an H x W x C image")
    probs = torch.softmax(model(arr.permute(2, 0, 1)[None]), dim=1)
    return probs[0].permute(1, 2, 0)


def _dice_term(p_fg: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    inter = (p_fg * gt).sum()
    return 1 - (2 * inter + DICE_EPS) / (p_fg.sum() + gt.sum() + DICE_EPS)


def seg_loss(probs: torch.Tensor, gt: torch.Tensor, w_ce: float = 0.1,
             w_dice: float = 0.9) -> torch.Tensor:
    """``w_ce * mean pixel CE + w_dice * soft Dice loss`` on the foreground.

    ``probs`` is ``(N, 2, H, W)`` (or ``(2, H, W)``), ``gt`` the matching
    binary mask. Dice sums run over every pixel of the batch.
    """
    if probs.dim() == 3:
        probs, gt = probs[None], gt[None]
    if probs.shape[0] != gt.shape[0] or probs.shape[2:] != gt.shape[1:] or probs.shape[1] != 2:
        raise ShapeError(f"probs {tuple(probs.shape)} and mask {tuple(gt.shape)} do not match")
    gt = gt.to(probs.dtype)
    p_fg = probs[:, 1]
    p_true = torch.where(gt > 0.5, p_fg, probs[:, 0])
    ce = -torch.log(p_true.clamp_min(1e-12)).mean()
    return w_ce * ce + w_dice * _dice_term(p_fg, gt)


def seg_loss_from_logits(logits: torch.Tensor, gt: torch.Tensor, w_ce: float = 0.1,
                         w_dice: float = 0.9) -> torch.Tensor:
    """Same loss computed stably from logits, used for training."""
    ce = F.cross_entropy(logits, gt.long())
    p_fg = torch.softmax(logits, dim=1)[:, 1]
    return w_ce * ce + w_dice * _dice_term(p_fg, gt.to(logits.dtype))
