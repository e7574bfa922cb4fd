"""Training, generation and downstream segmentation orchestration."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .codec import downsample_layout, identity_codec
from .denoiser import Denoiser, DenoiserConfig, init_denoiser
from .diffusion import ConditionBundle, NoiseSchedule, build_schedule, ddim_generate, diffusion_loss, forward_diffuse
from .errors import ConfigError, DataError, ParameterError
from .metrics import (MetricReport, fid, inception_score, iou_stats, layout_adherence, sample_iou,
                      style_fidelity, train_feature_model)
from .sampling import (STRATEGIES, apply_affine, random_affine, random_tissue_patch, sample_augmented,
                       sample_inference_styles, sample_multipatch, sample_nearby)
from .segmentation import SegUNet, seg_forward, seg_loss_from_logits
from .style import Aggregator, StyleEncoder, StyleQuerySet, apply_style_drop, encode_query_sets, to_nchw
from .synth import (SHAPE_CLASSES, ShapesCorpus, SlideCohort, circular_mean_deg, gen_slide_cohort,
                    segment_slide)

log = logging.getLogger(__name__)

LAYOUT_CLASSES = 2


def _seed_from(rng: np.random.Generator) -> int:
    return int(rng.integers(2 ** 31 - 1))


# --------------------------------------------------------------------------
# configs

@dataclass
class TrainConfig:
    epochs: int = 25
    samples_per_epoch: int = 10000
    batch_size: int = 32
    lr: float = 1e-4
    strategy: str = "multipatch"
    n_style: int = 10
    p_drop: float = 0.25
    seed: int = 0
    T: int = 1000
    schedule: str = "linear"
    base_channels: int = 32
    depth: int = 2
    time_embed_dim: int = 64
    style_dim: int = 128
    agg_order: str = "mean_then_mlp"
    patch_size: int = 16
    radius: int = 0  # nearby radius in px; 0 means one patch side

    def __post_init__(self):
        for name in ("epochs", "samples_per_epoch", "batch_size", "n_style", "T", "patch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.strategy not in STRATEGIES + ("none",):
            raise ConfigError(f"strategy must be one of {STRATEGIES + ('none',)}")
        if not 0 <= self.p_drop <= 1:
            raise ConfigError("p_drop must lie in [0, 1]")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


@dataclass
class GenerationRequest:
    layout_source: Optional[np.ndarray] = None  # (N, H, W) masks
    style_pool: object = None
    strategy: str = "multipatch"
    n_style: int = 10
    steps: int = 128
    guidance_scale: float = 1.5
    count: int = 20000
    seed: int = 0
    batch_size: int = 100
    augment_layouts: bool = True

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("count must be >= 1")
        if self.guidance_scale < 0:
            raise ConfigError("guidance_scale must be >= 0")


@dataclass
class SegTrainConfig:
    epochs: int = 75
    samples_per_epoch: int = 10000
    batch_size: int = 32
    lr: float = 3e-4
    synthetic_ratio: float = 4.0
    w_ce: float = 0.1
    w_dice: float = 0.9
    seed: int = 0
    depth: int = 4
    base_channels: int = 32
    val_fraction: float = 0.1
    augment: bool = True

    def __post_init__(self):
        if abs(self.w_ce + self.w_dice - 1.0) > 1e-9:
            raise ConfigError("w_ce + w_dice must equal 1")
        if self.synthetic_ratio < 0:
            raise ConfigError("synthetic_ratio must be >= 0")
        for name in ("epochs", "samples_per_epoch", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")


# --------------------------------------------------------------------------
# training data access

class _TrainingSource:
    """Draws (image, mask, query-set) triples for one strategy."""

    def __init__(self, corpus, cfg: TrainConfig):
        self.cfg = cfg
        self.is_slides = isinstance(corpus, SlideCohort)
        if self.is_slides:
            self.slides = corpus.annotated("annotated_train")
            if not self.slides:
                raise DataError("annotated pool is empty")
        else:
            if cfg.strategy in ("nearby", "multipatch"):
                raise ConfigError(f"strategy {cfg.strategy!r} needs a slide cohort")
            self.images, self.masks = corpus.annotated("annotated_train")
            if len(self.images) == 0:
                raise DataError("annotated pool is empty")

    def batch(self, rng: np.random.Generator, b: int):
        cfg = self.cfg
        xs, ms, queries = [], [], []
        radius = cfg.radius or cfg.patch_size
        for _ in range(b):
            if self.is_slides:
                slide = self.slides[rng.integers(len(self.slides))]
                ref = random_tissue_patch(slide, cfg.patch_size, rng)
                x, m = slide.patch(ref), slide.layout_patch(ref)
            else:
                i = rng.integers(len(self.images))
                x, m = self.images[i], self.masks[i]
            if cfg.strategy == "augmented":
                q = sample_augmented(x, rng)
            elif cfg.strategy == "nearby":
                q = sample_nearby(slide, ref, radius, rng)
            elif cfg.strategy == "multipatch":
                q = sample_multipatch(slide, cfg.n_style, rng, cfg.patch_size)
            else:
                q = None
            xs.append(x)
            ms.append(m)
            queries.append(q)
        return np.stack(xs), np.stack(ms), queries


def layout_tensor(masks: np.ndarray, factor: int = 1, classes: int = LAYOUT_CLASSES) -> torch.Tensor:
    onehot = downsample_layout(np.asarray(masks), factor, classes)  # (N, h, w, K)
    return torch.from_numpy(onehot).permute(0, 3, 1, 2).contiguous()


# --------------------------------------------------------------------------
# STEDM

@dataclass
class StedmModel:
    config: TrainConfig
    denoiser: Denoiser
    encoder: Optional[StyleEncoder]
    agg: Optional[Aggregator]
    sched: NoiseSchedule
    codec: object = field(default_factory=identity_codec)
    losses: list = field(default_factory=list)
    drop_fractions: list = field(default_factory=list)

    @property
    def styled(self) -> bool:
        return self.encoder is not None

    def eval(self) -> "StedmModel":
        for m in (self.denoiser, self.encoder, self.agg):
            if m is not None:
                m.eval()
        return self

    def condition(self, masks: np.ndarray, query_sets: Optional[Sequence[StyleQuerySet]]) -> ConditionBundle:
        layout = layout_tensor(masks, self.codec.factor)
        if not self.styled or query_sets is None:
            return ConditionBundle(layout)
        v, present = encode_query_sets(query_sets, self.encoder, self.agg)
        return ConditionBundle(layout, v, present)

    def state_arrays(self) -> dict:
        out = {}
        for prefix, mod in (("denoiser", self.denoiser), ("encoder", self.encoder), ("agg", self.agg)):
            if mod is not None:
                for k, v in mod.state_dict().items():
                    out[f"{prefix}.{k}"] = v.detach().cpu().numpy()
        return out

    def load_state_arrays(self, arrays: dict):
        for prefix, mod in (("denoiser", self.denoiser), ("encoder", self.encoder), ("agg", self.agg)):
            if mod is None:
                continue
            sd = {k[len(prefix) + 1:]: torch.from_numpy(np.array(v))
                  for k, v in arrays.items() if k.startswith(prefix + ".")}
            mod.load_state_dict(sd)


def build_model(cfg: TrainConfig, codec=None) -> StedmModel:
    codec = codec or identity_codec()
    dcfg = DenoiserConfig(latent_channels=codec.latent_channels, base_channels=cfg.base_channels,
                          depth=cfg.depth, time_embed_dim=cfg.time_embed_dim,
                          style_dim=cfg.style_dim, layout_classes=LAYOUT_CLASSES)
    denoiser = init_denoiser(dcfg, cfg.seed)
    encoder = agg = None
    if cfg.strategy != "none":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed + 1)
            encoder = StyleEncoder(cfg.style_dim, image_size=cfg.patch_size)
            agg = Aggregator(cfg.style_dim, cfg.agg_order)
    sched = build_schedule(cfg.T, cfg.schedule)
    return StedmModel(cfg, denoiser, encoder, agg, sched, codec)


def train_stedm(corpus, cfg: TrainConfig, codec=None,
                on_epoch: Optional[Callable[[int, StedmModel], None]] = None) -> StedmModel:
    """Jointly fit denoiser, style encoder and aggregator on the noise-prediction loss.

    Each epoch draws ``samples_per_epoch`` examples with replacement.
    Query sets are built by ``cfg.strategy``; a ``p_drop`` share of them is
    dropped so the denoiser also learns the style-free estimate.
    """
    source = _TrainingSource(corpus, cfg)
    model = build_model(cfg, codec)
    if model.codec.factor > 1 and cfg.patch_size % model.codec.factor:
        raise ConfigError("patch size must be divisible by the codec factor")
    params = list(model.denoiser.parameters())
    if model.styled:
        params += list(model.encoder.parameters()) + list(model.agg.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    steps_per_epoch = -(-cfg.samples_per_epoch // cfg.batch_size)

    for epoch in range(cfg.epochs):
        for m in (model.denoiser, model.encoder, model.agg):
            if m is not None:
                m.train()
        total, dropped, seen = 0.0, 0, 0
        for step in range(steps_per_epoch):
            b = min(cfg.batch_size, cfg.samples_per_epoch - step * cfg.batch_size)
            x, masks, queries = source.batch(rng, b)
            if model.styled:
                queries = apply_style_drop(queries, cfg.p_drop, _seed_from(rng))
                dropped += sum(q.dropped for q in queries)
            else:
                queries = None
            cond = model.condition(masks, queries)
            z0 = model.codec.encode(to_nchw(x))
            t = torch.randint(1, cfg.T + 1, (b,), generator=gen)
            eps = torch.randn(z0.shape, generator=gen)
            zt = forward_diffuse(z0, t, eps, model.sched)
            loss = diffusion_loss(model.denoiser(zt, t, cond), eps)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * b
            seen += b
        model.losses.append(total / seen)
        model.drop_fractions.append(dropped / seen if model.styled else 0.0)
        log.info("epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, model.losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, model)
    return model.eval()


# --------------------------------------------------------------------------
# generation

@dataclass
class GeneratedSample:
    image: np.ndarray   # (H, W, 3) in [-1, 1]
    mask: np.ndarray    # (H, W) uint8
    style_refs: list


@torch.no_grad()
def generate_from_queries(model: StedmModel, masks: np.ndarray,
                          query_sets: Optional[Sequence[StyleQuerySet]], steps: int = 128,
                          scale: float = 1.5, seed: int = 0) -> np.ndarray:
    """Images ``(B, H, W, 3)`` for given masks and query sets (one per mask)."""
    model.eval()
    cond = model.condition(masks, query_sets)
    # pixel-space models know their range; latents do not
    clip = (-1.0, 1.0) if model.codec.factor == 1 else None
    z = ddim_generate(model.denoiser, cond, steps, scale, seed, model.sched,
                      channels=model.codec.latent_channels, clip_x0=clip)
    x = model.codec.decode(z).clamp(-1, 1)
    return x.permute(0, 2, 3, 1).numpy()


def generate_synthetic(model: StedmModel, req: GenerationRequest) -> list[GeneratedSample]:
    """Known layouts (affine-augmented) paired with unseen style queries."""
    if req.layout_source is None or len(req.layout_source) == 0:
        raise DataError("layout source is empty")
    if model.styled and (req.style_pool is None or len(req.style_pool) == 0):
        raise DataError("style pool is empty")
    if req.steps > model.sched.T:
        raise ParameterError("more sampling steps than diffusion steps")
    rng = np.random.default_rng(req.seed)
    size = model.config.patch_size
    out: list[GeneratedSample] = []
    while len(out) < req.count:
        b = min(req.batch_size, req.count - len(out))
        masks, queries = [], []
        for _ in range(b):
            m = req.layout_source[rng.integers(len(req.layout_source))]
            if req.augment_layouts:
                m = apply_affine(m, random_affine(rng))
            masks.append(m)
            if model.styled:
                queries.append(sample_inference_styles(req.style_pool, req.strategy, req.n_style,
                                                       rng, size=size))
        masks = np.stack(masks).astype(np.uint8)
        imgs = generate_from_queries(model, masks, queries if model.styled else None,
                                     req.steps, req.guidance_scale, _seed_from(rng))
        for img, m, q in zip(imgs, masks, queries or [None] * b):
            out.append(GeneratedSample(img, m, [] if q is None else list(q.refs)))
    return out


# --------------------------------------------------------------------------
# segmentation

def mixing_draws(n: int, synthetic_ratio: float, rng: np.random.Generator,
                 have_synthetic: bool = True) -> np.ndarray:
    """Bool array, True where a draw comes from the synthetic pool.

    Synthetic and real are weighted ``synthetic_ratio : 1``.
    """
    if not have_synthetic or synthetic_ratio == 0:
        return np.zeros(n, dtype=bool)
    return rng.random(n) < synthetic_ratio / (synthetic_ratio + 1.0)


def _augment(x: np.ndarray, m: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    k = int(rng.integers(4))
    x, m = np.rot90(x, k, axes=(0, 1)), np.rot90(m, k)
    if rng.random() < 0.5:
        x, m = x[:, ::-1], m[:, ::-1]
    return x, m


@dataclass
class SegResult:
    model: SegUNet
    val_losses: list
    train_losses: list
    best_epoch: int
    synthetic_fraction: float


@torch.no_grad()
def _val_loss(model: SegUNet, images: np.ndarray, masks: np.ndarray, cfg: SegTrainConfig) -> float:
    model.eval()
    total = 0.0
    for i in range(0, len(images), 256):
        logits = model(to_nchw(images[i:i + 256]))
        gt = torch.from_numpy(np.asarray(masks[i:i + 256], np.int64))
        total += float(seg_loss_from_logits(logits, gt, cfg.w_ce, cfg.w_dice)) * len(logits)
    return total / len(images)


def train_segmentation(real: tuple, synthetic: Optional[tuple], cfg: SegTrainConfig,
                       val: Optional[tuple] = None) -> SegResult:
    """Train on real (and optionally synthetic) ``(images, masks)`` pairs.

    Without an explicit ``val`` pair a ``val_fraction`` share of the real
    pool is held out. The returned model is the epoch with the lowest
    validation loss.
    """
    images, masks = (np.asarray(a) for a in real)
    if len(images) == 0:
        raise DataError("real pool is empty")
    rng = np.random.default_rng(cfg.seed)
    if val is None:
        perm = rng.permutation(len(images))
        n_val = max(1, int(round(cfg.val_fraction * len(images))))
        val = (images[perm[:n_val]], masks[perm[:n_val]])
        images, masks = images[perm[n_val:]], masks[perm[n_val:]]
    syn_x, syn_m = (np.asarray(a) for a in synthetic) if synthetic is not None else (None, None)
    have_syn = syn_x is not None and len(syn_x) > 0

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = SegUNet(cfg.depth, cfg.base_channels)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    best, best_state, best_epoch = np.inf, None, -1
    val_losses, train_losses = [], []
    n_syn_total = n_total = 0
    steps = -(-cfg.samples_per_epoch // cfg.batch_size)
    for epoch in range(cfg.epochs):
        model.train()
        running = 0.0
        for step in range(steps):
            b = min(cfg.batch_size, cfg.samples_per_epoch - step * cfg.batch_size)
            from_syn = mixing_draws(b, cfg.synthetic_ratio, rng, have_syn)
            n_syn_total += int(from_syn.sum())
            n_total += b
            xb, mb = [], []
            for s in from_syn:
                if s:
                    j = rng.integers(len(syn_x))
                    x, m = syn_x[j], syn_m[j]
                else:
                    j = rng.integers(len(images))
                    x, m = images[j], masks[j]
                if cfg.augment:
                    x, m = _augment(x, m, rng)
                xb.append(x)
                mb.append(m)
            logits = model(to_nchw(np.stack(xb)))
            gt = torch.from_numpy(np.stack(mb).astype(np.int64))
            loss = seg_loss_from_logits(logits, gt, cfg.w_ce, cfg.w_dice)
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += loss.item() * b
        train_losses.append(running / cfg.samples_per_epoch)
        vl = _val_loss(model, val[0], val[1], cfg)
        val_losses.append(vl)
        if vl < best:
            best, best_epoch = vl, epoch
            best_state = copy.deepcopy(model.state_dict())
        log.info("seg epoch %d val loss %.4f", epoch + 1, vl)
    model.load_state_dict(best_state)
    model.eval()
    return SegResult(model, val_losses, train_losses, best_epoch, n_syn_total / max(1, n_total))


@torch.no_grad()
def segment_slide_tiled(model: SegUNet, pixels: np.ndarray, tile: int) -> np.ndarray:
    """Binary prediction for a whole slide from non-overlapping tiles."""
    model.eval()
    h, w = pixels.shape[:2]
    hh, ww = h // tile * tile, w // tile * tile
    tiles = pixels[:hh, :ww].reshape(hh // tile, tile, ww // tile, tile, -1).transpose(0, 2, 1, 3, 4)
    flat = tiles.reshape(-1, tile, tile, pixels.shape[2])
    preds = []
    for i in range(0, len(flat), 256):
        preds.append(seg_forward(model, to_nchw(flat[i:i + 256])).argmax(dim=1).numpy())
    pred = np.concatenate(preds).reshape(hh // tile, ww // tile, tile, tile).transpose(0, 2, 1, 3)
    out = np.zeros((h, w), dtype=np.uint8)
    out[:hh, :ww] = pred.reshape(hh, ww)
    return out


def evaluate_on_slides(model: SegUNet, slides: Sequence, tile: int) -> tuple[float, float, list]:
    """Per-slide foreground IoU inside tissue: (mean %, variance, per-slide IoUs)."""
    preds, gts = [], []
    for s in slides:
        pred = segment_slide_tiled(model, s.pixels, tile).astype(bool)
        preds.append(pred)
        gts.append(s.layout_field.astype(bool))
    mean, var = iou_stats(preds, gts)
    return mean, var, [sample_iou(p, g) for p, g in zip(preds, gts)]


def patch_bank(slides: Sequence, count: int, size: int,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random tissue patches and their layout patches from annotated slides."""
    xs, ms = [], []
    for _ in range(count):
        s = slides[rng.integers(len(slides))]
        ref = random_tissue_patch(s, size, rng)
        xs.append(s.patch(ref))
        ms.append(s.layout_patch(ref))
    return np.stack(xs), np.stack(ms)


# --------------------------------------------------------------------------
# corpus-level helpers shared by the CLI and the experiment grid

def layout_bank(corpus, count: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Annotated layouts to draw generation requests from."""
    if isinstance(corpus, SlideCohort):
        return patch_bank(corpus.annotated("annotated_train"), count, size, rng)[1]
    return corpus.annotated("annotated_train")[1]


def style_pool_for(corpus, hue_interval=None):
    if hue_interval is not None and isinstance(corpus, ShapesCorpus):
        return corpus.style_pool(hue_interval)
    return corpus.style_pool()


def requested_style(corpus, refs: list):
    """Ground-truth style of a query set: a hue for shapes, style params for slides."""
    if not refs:
        return None
    if isinstance(corpus, SlideCohort):
        return corpus.slides[refs[0].slide_id].style_params
    if isinstance(corpus, ShapesCorpus):
        hues = [corpus.hues[int(r.split("-")[1])] for r in refs]
        return circular_mean_deg(np.asarray(hues))
    return None


def _feature_labels(corpus, rng, size: int):
    if isinstance(corpus, SlideCohort):
        x, m = patch_bank(corpus.annotated("annotated_train"), 2000, size, rng)
        return x, (m.reshape(len(m), -1).mean(axis=1) > 0.1).astype(np.int64), 2
    x, _ = corpus.annotated("annotated_train")
    idx = corpus.index("annotated_train")
    return x, corpus.shape_classes[idx], len(SHAPE_CLASSES)


def _real_reference(corpus, count: int, size: int, rng) -> np.ndarray:
    if isinstance(corpus, SlideCohort):
        return patch_bank([s for s in corpus.split_slides("style_source")], count, size, rng)[0]
    pool = corpus.style_pool()
    return pool.images[rng.permutation(len(pool))[:count]]


def evaluate_generation(corpus, samples: Sequence[GeneratedSample], seed: int = 0,
                        with_fid: bool = True) -> MetricReport:
    """Style fidelity, layout adherence and, optionally, FID / IS on a small
    feature model trained on the annotated data."""
    images = [s.image for s in samples]
    masks = [s.mask for s in samples]
    styles = [requested_style(corpus, s.style_refs) for s in samples]
    report = MetricReport()
    if all(st is not None for st in styles):
        slides = isinstance(corpus, SlideCohort)
        hues = [st["hue_deg"] if slides else st for st in styles]
        report.style_fidelity = style_fidelity(images, hues, masks).fraction
        if slides:
            report.layout_adherence_iou = float(np.median(
                [sample_iou(segment_slide(im, st), m) for im, st, m in zip(images, styles, masks)]))
        else:
            report.layout_adherence_iou = layout_adherence(images, masks)
    elif isinstance(corpus, ShapesCorpus):
        report.layout_adherence_iou = layout_adherence(images, masks)
    if with_fid and isinstance(corpus, (ShapesCorpus, SlideCohort)):
        rng = np.random.default_rng(seed)
        size = images[0].shape[0]
        x, y, k = _feature_labels(corpus, rng, size)
        fm = train_feature_model(x, y, k, seed=seed)
        real = _real_reference(corpus, len(images), size, rng)
        gen = np.stack(images)
        report.fid = fid(fm.features(real), fm.features(gen))
        report.is_score = inception_score(fm.probs(gen))
    return report


# --------------------------------------------------------------------------
# experiment grid

RESULT_COLUMNS = ("annotated", "strategy", "seed", "iou_mean", "iou_var_x100", "n_test",
                  "synthetic", "best_epoch")
SUMMARY_COLUMNS = ("annotated", "strategy", "n_seeds", "mean_iou", "iou_variance")


def run_experiment_grid(annotated_sizes: Sequence[int], strategies: Sequence[str],
                        seeds: Sequence[int], train_cfg: TrainConfig, seg_cfg: SegTrainConfig,
                        gen_steps: int = 128, guidance_scale: float = 1.5, n_style: int = 10,
                        synthetic_count: int = 2000, real_count: int = 2000,
                        cohort_kwargs: Optional[dict] = None,
                        progress: Optional[Callable[[dict], None]] = None) -> list[dict]:
    """Segmentation with and without STEDM data over annotated sizes x strategies x seeds.

    ``real_only`` trains on annotated patches alone; every other strategy
    trains a diffusion model (``none`` is the layout-only baseline), draws
    ``synthetic_count`` images and mixes them in. One row per cell and seed.
    IoU is per test slide; ``iou_var_x100`` is the variance of the per-slide
    IoU fractions times 100.
    """
    rows = []
    cohort_kwargs = dict(cohort_kwargs or {})
    size = train_cfg.patch_size
    for a in annotated_sizes:
        for seed in seeds:
            cohort = gen_slide_cohort(annotated=a, seed=seed, **cohort_kwargs)
            train_slides = cohort.annotated("annotated_train")
            rng = np.random.default_rng(seed)
            real = patch_bank(train_slides, real_count, size, rng)
            val_slides = cohort.annotated("annotated_val")
            val = patch_bank(val_slides, max(1, real_count // 10), size, rng) if val_slides else None
            test = cohort.split_slides("test")
            for strat in strategies:
                synthetic = None
                if strat != "real_only":
                    cfg = _with(train_cfg, strategy=strat, seed=seed)
                    model = train_stedm(cohort, cfg)
                    req = GenerationRequest(
                        layout_source=layout_bank(cohort, synthetic_count, size, rng),
                        style_pool=cohort.style_pool(), strategy="multipatch" if strat == "none" else strat,
                        n_style=n_style, steps=gen_steps, guidance_scale=guidance_scale,
                        count=synthetic_count, seed=seed)
                    samples = generate_synthetic(model, req)
                    synthetic = (np.stack([s.image for s in samples]), np.stack([s.mask for s in samples]))
                res = train_segmentation(real, synthetic, _with(seg_cfg, seed=seed), val=val)
                mean, var, _ = evaluate_on_slides(res.model, test, size)
                row = {"annotated": a, "strategy": strat, "seed": seed, "iou_mean": round(mean, 6),
                       "iou_var_x100": round(var * 100, 6), "n_test": len(test),
                       "synthetic": 0 if synthetic is None else len(synthetic[0]),
                       "best_epoch": res.best_epoch}
                rows.append(row)
                if progress is not None:
                    progress(row)
    return rows


def _with(cfg, **changes):
    d = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    d.update(changes)
    return type(cfg)(**d)


def format_cell(values: Sequence[float]) -> str:
    """``mean (sd)`` over seeds, two decimals; sd is 0 for a single seed."""
    v = np.asarray(values, np.float64)
    sd = v.std(ddof=1) if len(v) > 1 else 0.0
    return f"{v.mean():.2f} ({sd:.2f})"


def summarize_grid(rows: Sequence[dict]) -> list[dict]:
    keys = []
    for r in rows:
        k = (r["annotated"], r["strategy"])
        if k not in keys:
            keys.append(k)
    out = []
    for a, s in keys:
        sel = [r for r in rows if r["annotated"] == a and r["strategy"] == s]
        out.append({"annotated": a, "strategy": s, "n_seeds": len(sel),
                    "mean_iou": format_cell([r["iou_mean"] for r in sel]),
                    "iou_variance": format_cell([r["iou_var_x100"] for r in sel])})
    return out


def write_tsv(rows: Sequence[dict], columns: Sequence[str], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(columns) + "\n")
        for r in rows:
            fh.write("\t".join(str(r[c]) for c in columns) + "\n")


def text_bar_plot(rows: Sequence[dict], width: int = 40) -> str:
    """Mean IoU per strategy, one block per annotated size."""
    lines = []
    for a in dict.fromkeys(r["annotated"] for r in rows):
        lines.append(f"annotated = {a}")
        sel = [r for r in rows if r["annotated"] == a]
        for s in dict.fromkeys(r["strategy"] for r in sel):
            m = float(np.mean([r["iou_mean"] for r in sel if r["strategy"] == s]))
            lines.append(f"  {s:<11}|{'#' * int(round(m / 100 * width)):<{width}}| {m:6.2f}")
        lines.append("")
    return "\n".join(lines)
