"""Generation and segmentation metrics.

FID and IS run on features/probabilities of a small shape classifier
(:class:`FeatureModel`) instead of Inception. Values are comparable across
runs on one cohort and nowhere else.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError, ShapeError
from .synth import circular_mean_deg, hue_distance, segment_shapes, to_hsv

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# FID

def _sqrt_trace_product(s1: np.ndarray, s2: np.ndarray) -> float:
    """Tr((s1 s2)^(1/2)) via the symmetric form s1^(1/2) s2 s1^(1/2)."""
    w, v = np.linalg.eigh((s1 + s1.T) / 2)
    root = (v * np.sqrt(np.clip(w, 0, None))) @ v.T
    m = root @ s2 @ root
    ev = np.linalg.eigvalsh((m + m.T) / 2)
    return float(np.sqrt(np.clip(ev, 0, None)).sum())


def fid_from_moments(mu1, sigma1, mu2, sigma2) -> float:
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, np.float64)), np.atleast_1d(np.asarray(mu2, np.float64))
    s1, s2 = np.atleast_2d(np.asarray(sigma1, np.float64)), np.atleast_2d(np.asarray(sigma2, np.float64))
    if mu1.shape != mu2.shape or s1.shape != s2.shape:
        raise ShapeError("moment shapes differ")
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2 * _sqrt_trace_product(s1, s2))


def _moments(feats: np.ndarray):
    feats = np.asarray(feats, np.float64)
    if feats.ndim != 2 or len(feats) < 2:
        raise DataError("need at least two feature vectors")
    cov = np.atleast_2d(np.cov(feats, rowvar=False))
    if len(feats) < feats.shape[1] + 1:
        cov = cov + 1e-6 * np.eye(feats.shape[1])
    return feats.mean(axis=0), cov


def fid(real_feats: np.ndarray, gen_feats: np.ndarray) -> float:
    mu1, s1 = _moments(real_feats)
    mu2, s2 = _moments(gen_feats)
    return fid_from_moments(mu1, s1, mu2, s2)


# --------------------------------------------------------------------------
# Inception score

def inception_score(probs: np.ndarray, splits: int = 1) -> float:
    p = np.asarray(probs, np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise DataError("probabilities must be a non-empty (N, K) array")
    if (p < 0).any() or not np.allclose(p.sum(axis=1), 1.0, atol=1e-5):
        raise DataError("each probability vector must be non-negative and sum to 1")
    scores = []
    for chunk in np.array_split(p, max(1, min(splits, len(p)))):
        marginal = chunk.mean(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(chunk > 0, chunk * (np.log(chunk) - np.log(marginal)), 0.0)
        scores.append(np.exp(terms.sum(axis=1).mean()))
    return float(np.mean(scores))


# --------------------------------------------------------------------------
# IoU

def sample_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} differ")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def iou_stats(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> tuple[float, float]:
    """(mean foreground IoU in percent, variance of per-sample IoU)."""
    if len(preds) != len(gts):
        raise ShapeError("prediction and ground-truth lists differ in length")
    if len(preds) == 0:
        raise DataError("no samples")
    ious = np.array([sample_iou(p, g) for p, g in zip(preds, gts)])
    return float(ious.mean() * 100.0), float(ious.var())


# --------------------------------------------------------------------------
# synthetic-ground-truth oracles

@dataclass
class FidelityResult:
    fraction: float
    skipped: int
    hue_errors: list

    def __float__(self):
        return self.fraction


def style_fidelity(generated: Sequence[np.ndarray], requested_hues: Sequence[float],
                   masks: Sequence[np.ndarray], tolerance_deg: float = 30.0) -> FidelityResult:
    """Fraction of images whose circular-mean foreground hue lies within
    ``tolerance_deg`` of the requested hue. Empty-foreground samples are
    skipped and tallied."""
    ok, skipped, errors = 0, 0, []
    for img, hue, m in zip(generated, requested_hues, masks):
        m = np.asarray(m).astype(bool)
        if not m.any():
            skipped += 1
            continue
        got = circular_mean_deg(to_hsv(img)[..., 0][m])
        err = float(hue_distance(got, hue))
        errors.append(err)
        ok += err <= tolerance_deg
    n = len(errors)
    return FidelityResult(ok / n if n else 0.0, skipped, errors)


def layout_adherence(generated: Sequence[np.ndarray], requested_masks: Sequence[np.ndarray],
                     segmenter=segment_shapes) -> float:
    """Median IoU between oracle-segmented generations and requested masks."""
    ious = [sample_iou(segmenter(img), m) for img, m in zip(generated, requested_masks)]
    return float(np.median(ious))


# --------------------------------------------------------------------------
# feature model

class FeatureModel(nn.Module):
    """Small classifier; penultimate activations are the FID features."""

    def __init__(self, classes: int, in_channels: int = 3, width: int = 32, feat_dim: int = 64):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(width, width * 2, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(width * 2, feat_dim, 3, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.classifier = nn.Linear(feat_dim, classes)

    def forward(self, x):
        return self.classifier(self.body(x))

    @torch.no_grad()
    def features(self, images: np.ndarray) -> np.ndarray:
        self.eval()
        return self.body(_nchw(images)).numpy()

    @torch.no_grad()
    def probs(self, images: np.ndarray) -> np.ndarray:
        self.eval()
        return torch.softmax(self(_nchw(images)), dim=1).double().numpy()


def _nchw(images) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.asarray(images, np.float32))).permute(0, 3, 1, 2)


def train_feature_model(images: np.ndarray, labels: np.ndarray, classes: int, seed: int = 0,
                        epochs: int = 5, batch_size: int = 64, lr: float = 1e-3) -> FeatureModel:
    rng = np.random.default_rng(seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = FeatureModel(classes)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    x, y = _nchw(images), torch.as_tensor(np.asarray(labels), dtype=torch.long)
    for _ in range(epochs):
        perm = rng.permutation(len(x))
        model.train()
        for i in range(0, len(x), batch_size):
            j = perm[i:i + batch_size]
            loss = F.cross_entropy(model(x[j]), y[j])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return model.eval()


@dataclass
class MetricReport:
    fid: Optional[float] = None
    is_score: Optional[float] = None
    iou_mean: Optional[float] = None
    iou_variance: Optional[float] = None
    style_fidelity: Optional[float] = None
    layout_adherence_iou: Optional[float] = None

    def as_dict(self) -> dict:
        return asdict(self)
