"""Style encoder, set aggregation and the style-drop used for guidance."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError, ShapeError

AGG_ORDERS = ("mean_then_mlp", "mlp_then_mean")


@dataclass
class StyleQuerySet:
    """1..n style query images ``(n, H, W, C)`` in [-1, 1] plus the drop flag.

    ``refs`` holds the patch references the images were cut from (slides
    only). ``flagged`` marks a degenerate draw, e.g. a nearby query that had
    to fall back to the anchor patch.
    """

    images: np.ndarray
    dropped: bool = False
    refs: list = field(default_factory=list)
    flagged: bool = False

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim == 3:
            self.images = self.images[None]
        if self.images.ndim != 4:
            raise ShapeError("style queries must be (n, H, W, C)")
        if len(self.images) == 0 and not self.dropped:
            raise ShapeError("an undropped query set needs at least one image")

    @property
    def n(self) -> int:
        return len(self.images)


class StyleEncoder(nn.Module):
    """Small conv net with global average pooling. Consumes pixels only.

    Per-channel mean and std of the input join the pooled features before
    the linear head, giving colour statistics a short path to the output.
    """

    def __init__(self, style_dim: int = 128, in_channels: int = 3, image_size: int = 16,
                 width: int = 32):
        super().__init__()
        self.style_dim = style_dim
        self.in_channels = in_channels
        self.image_size = image_size
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width * 2, width * 2, 3, padding=1), nn.SiLU(),
        )
        self.head = nn.Linear(width * 2 + 2 * in_channels, style_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[1] != self.in_channels:
            raise ShapeError(f"expected (N, {self.in_channels}, H, W), got {tuple(images.shape)}")
        if images.shape[-2:] != (self.image_size, self.image_size):
            raise ShapeError(
                f"encoder expects {self.image_size}x{self.image_size} images, "
                f"got {tuple(images.shape[-2:])}")
        h = self.net(images).mean(dim=(2, 3))
        stats = torch.cat([images.mean(dim=(2, 3)), images.std(dim=(2, 3))], dim=1)
        return self.head(torch.cat([h, stats], dim=1))


def set_mean(vectors: torch.Tensor) -> torch.Tensor:
    """Mean over axis 1 of ``(B, n, d)`` that is exact for duplicates and
    bitwise independent of the input order.

    Rows are put in a canonical (lexicographic) order and averaged with a
    running update ``m += (x - m) / k``, which leaves ``m`` untouched when
    ``x == m``.
    """
    out = []
    for rows in vectors:
        keys = rows.detach().cpu().numpy()
        order = np.lexsort(keys.T[::-1])
        rows = rows[torch.from_numpy(order)]
        m = rows[0]
        for k in range(1, rows.shape[0]):
            m = m + (rows[k] - m) / (k + 1)
        out.append(m)
    return torch.stack(out)


class Aggregator(nn.Module):
    """Two linear layers with a ReLU, applied around a mean pool over the set."""

    def __init__(self, style_dim: int = 128, order: str = "mean_then_mlp"):
        super().__init__()
        if order not in AGG_ORDERS:
            raise ParameterError(f"agg_order must be one of {AGG_ORDERS}")
        self.order = order
        self.fc1 = nn.Linear(style_dim, style_dim)
        self.fc2 = nn.Linear(style_dim, style_dim)

    def mlp(self, v: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(v)))

    def forward(self, vectors: torch.Tensor, counts: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Aggregate ``(B, n, d)`` sets, or a flat ``(sum n, d)`` stack split by ``counts``."""
        if counts is None:
            if vectors.dim() != 3:
                raise ShapeError("expected (B, n, d) vectors")
            if self.order == "mean_then_mlp":
                return self.mlp(set_mean(vectors))
            return set_mean(self.mlp(vectors))
        if self.order == "mlp_then_mean":
            vectors = self.mlp(vectors)
        pooled = torch.cat([set_mean(part[None]) for part in torch.split(vectors, counts.tolist())])
        return self.mlp(pooled) if self.order == "mean_then_mlp" else pooled


def to_nchw(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.asarray(images, np.float32))).permute(0, 3, 1, 2)


def extract_style(image, encoder: StyleEncoder) -> torch.Tensor:
    """Style vector of one ``H x W x C`` image."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3:
        raise ShapeError("expected a single H x W x C image")
    return encoder(to_nchw(arr[None]))[0]


def aggregate(vectors: Sequence[torch.Tensor], agg: Aggregator) -> torch.Tensor:
    if len(vectors) == 0:
        raise ShapeError("need at least one style vector")
    dims = {int(v.shape[-1]) for v in vectors}
    if len(dims) != 1 or any(v.dim() != 1 for v in vectors):
        raise ShapeError(f"style vectors must share one length, got {sorted(dims)}")
    return agg(torch.stack(list(vectors))[None])[0]


def encode_query_sets(sets: Sequence[StyleQuerySet], encoder: StyleEncoder,
                      agg: Aggregator) -> tuple[torch.Tensor, torch.Tensor]:
    """Batch style vectors ``(B, d)`` and the presence mask ``(B,)``.

    Rows of dropped sets are zero-filled and marked absent; the denoiser
    swaps in its null style for them.
    """
    present = torch.tensor([not s.dropped for s in sets], dtype=torch.bool)
    out = torch.zeros(len(sets), encoder.style_dim)
    live = [s for s in sets if not s.dropped]
    if live:
        stack = np.concatenate([s.images for s in live], axis=0)
        counts = torch.tensor([s.n for s in live])
        vecs = agg(encoder(to_nchw(stack)), counts)
        out = out.index_put((present.nonzero()[:, 0],), vecs)
    return out, present


def apply_style_drop(batch: Sequence[StyleQuerySet], p_drop: float,
                     seed: int) -> list[StyleQuerySet]:
    """Mark whole query sets as dropped, each independently with ``p_drop``."""
    if not 0.0 <= p_drop <= 1.0:
        raise ParameterError(f"p_drop must lie in [0, 1], got {p_drop}")
    rng = np.random.default_rng(seed)
    draws = rng.random(len(batch)) < p_drop
    return [dataclasses.replace(q, dropped=bool(d) or q.dropped) for q, d in zip(batch, draws)]
