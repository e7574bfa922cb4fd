"""``stedm`` command line.

Every subcommand reads an optional ``--config`` file (see :mod:`stedm.config`),
applies ``--set section.key=value`` overrides and dedicated flags on top,
and writes into ``<out>/<command>-<run id>/`` together with a ``run.json``
manifest. The run id hashes the command, the effective config and the
inputs, so identical invocations land in the same directory.

Exit codes: 0 success, 2 usage, 3 invalid configuration or parameters,
4 data problems, 5 anything else.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import io as sio
from .config import RunConfig, load_config, parse_config
from .errors import ConfigError, DataError, StedmError
from .metrics import iou_stats
from .pipelines import (RESULT_COLUMNS, SUMMARY_COLUMNS, GeneratedSample, GenerationRequest, TrainConfig,
                        build_model, evaluate_generation, evaluate_on_slides, generate_synthetic, layout_bank,
                        patch_bank, run_experiment_grid, style_pool_for, summarize_grid, text_bar_plot,
                        train_segmentation, train_stedm, write_tsv)
from .segmentation import SegUNet, seg_forward
from .style import to_nchw
from .synth import (CohortParams, PatchRef, ShapesCorpus, SlideCohort, from_uint8, gen_shapes_dataset,
                    gen_slide_cohort, ingest_folder, to_uint8)

log = logging.getLogger("stedm")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4, 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# flag name -> (config key, type)
_FLAG_KEYS = {
    "gen-data": {"kind": ("data.kind", str), "count": ("data.count", int),
                 "patients": ("data.patients", int), "annotated": ("data.annotated", int),
                 "images_dir": ("data.images_dir", str), "masks_dir": ("data.masks_dir", str)},
    "train-diffusion": {"epochs": ("diffusion.epochs", int), "strategy": ("diffusion.strategy", str),
                        "samples_per_epoch": ("diffusion.samples_per_epoch", int)},
    "sample": {"count": ("generation.count", int), "steps": ("generation.steps", int),
               "scale": ("generation.guidance_scale", float)},
    "train-seg": {"epochs": ("segmentation.epochs", int)},
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stedm", description="Style-extracting diffusion toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def common(sp):
        sp.add_argument("--config", help="plain-text config file")
        sp.add_argument("--seed", type=int, help="overrides run.seed (default 0, logged)")
        sp.add_argument("--out", default="runs", help="output root directory")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="config override, repeatable")
        return sp

    g = common(sub.add_parser("gen-data", help="generate a synthetic corpus or ingest a folder"))
    g.add_argument("--kind", choices=["shapes", "cohort", "folder"])
    g.add_argument("--count", type=int)
    g.add_argument("--patients", type=int)
    g.add_argument("--annotated", type=int)
    g.add_argument("--images-dir", dest="images_dir")
    g.add_argument("--masks-dir", dest="masks_dir")

    t = common(sub.add_parser("train-diffusion", help="train a STEDM (or layout-only) model"))
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--strategy", choices=["augmented", "nearby", "multipatch", "none"])
    t.add_argument("--samples-per-epoch", dest="samples_per_epoch", type=int)

    s = common(sub.add_parser("sample", help="generate images for known layouts and unseen styles"))
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--count", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--scale", type=float)

    ts = common(sub.add_parser("train-seg", help="train the segmentation network"))
    ts.add_argument("--data", required=True)
    ts.add_argument("--synthetic", help="synthetic.npz from `sample`")
    ts.add_argument("--epochs", type=int)

    eg = common(sub.add_parser("eval-gen", help="score generated images"))
    eg.add_argument("--data", required=True)
    eg.add_argument("--synthetic", required=True)
    eg.add_argument("--no-fid", dest="no_fid", action="store_true")

    es = common(sub.add_parser("eval-seg", help="per-slide IoU of a segmentation checkpoint"))
    es.add_argument("--data", required=True)
    es.add_argument("--checkpoint", required=True)

    common(sub.add_parser("grid", help="run the data-size x strategy experiment grid"))

    r = sub.add_parser("replay", help="re-execute the run recorded in a run.json")
    r.add_argument("manifest")
    r.add_argument("--out", required=True)
    return p


# --------------------------------------------------------------------------
# config resolution

def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for flag, (key, _) in _FLAG_KEYS.get(args.command, {}).items():
        val = getattr(args, flag, None)
        if val is not None:
            overrides[key] = str(val)
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg


def _inputs(args) -> dict:
    out = {}
    for name in ("data", "checkpoint", "synthetic"):
        val = getattr(args, name, None)
        if val:
            path = Path(val)
            if path.is_file():
                out[name] = {"path": str(path.resolve()), "sha256": sio.sha256_file(path)}
            elif (path / "manifest.json").is_file():
                out[name] = {"path": str(path.resolve()),
                             "sha256": sio.sha256_file(path / "manifest.json")}
            else:
                raise DataError(f"--{name} {val} does not exist")
    return out


def _argv_for_manifest(args) -> list:
    """Canonical argv: the effective config replaces file + overrides."""
    argv = [args.command]
    for name in ("data", "checkpoint", "synthetic"):
        val = getattr(args, name, None)
        if val:
            argv += [f"--{name}", str(Path(val).resolve())]
    if getattr(args, "no_fid", False):
        argv.append("--no-fid")
    return argv


# --------------------------------------------------------------------------
# data / model loading

def _make_dataset(cfg: RunConfig):
    d = cfg.data
    if d.kind == "shapes":
        return gen_shapes_dataset(d.count, (d.holdout_lo, d.holdout_hi), cfg.seed, d.size)
    if d.kind == "cohort":
        return gen_slide_cohort(d.patients, d.slide_size, d.annotated, cfg.seed, d.test_patients,
                                d.val_patients, CohortParams(hue_shift=d.hue_shift))
    return ingest_folder(d.images_dir, d.masks_dir or None, cfg.diffusion.patch_size,
                         seed=cfg.seed)


def _load_stedm(path):
    arrays, meta = sio.load_checkpoint(path)
    if meta.get("type") != "stedm":
        raise DataError(f"{path} is not a diffusion checkpoint")
    tcfg = TrainConfig(**meta["train_config"])
    model = build_model(tcfg)
    model.load_state_arrays(arrays)
    model.losses = list(meta.get("losses", []))
    return model.eval()


def _load_seg(path) -> SegUNet:
    arrays, meta = sio.load_checkpoint(path)
    if meta.get("type") != "seg":
        raise DataError(f"{path} is not a segmentation checkpoint")
    model = SegUNet(meta["depth"], meta["base_channels"])
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
    return model.eval()


def _save_synthetic(path, samples, corpus):
    refs = [json.dumps([r if isinstance(r, str) else [r.slide_id, r.x, r.y, r.size]
                        for r in s.style_refs]) for s in samples]
    np.savez(path, images=np.stack([to_uint8(s.image) for s in samples]),
             masks=np.stack([s.mask for s in samples]).astype(np.uint8),
             refs=np.array(refs, dtype=np.str_))


def _load_synthetic(path) -> list[GeneratedSample]:
    try:
        with np.load(path, allow_pickle=False) as z:
            images, masks, refs = z["images"], z["masks"], z["refs"]
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read synthetic set {path}: {exc}") from None
    out = []
    for im, m, r in zip(images, masks, refs):
        rs = [x if isinstance(x, str) else PatchRef(*x) for x in json.loads(str(r))]
        out.append(GeneratedSample(from_uint8(im), m, rs))
    return out


def _real_patches(corpus, cfg: RunConfig, rng):
    if isinstance(corpus, SlideCohort):
        slides = corpus.annotated("annotated_train")
        real = patch_bank(slides, 2000, cfg.diffusion.patch_size, rng)
        vs = corpus.annotated("annotated_val")
        val = patch_bank(vs, 200, cfg.diffusion.patch_size, rng) if vs else None
        return real, val
    real = corpus.annotated("annotated_train")
    vx, vm = corpus.annotated("annotated_val")
    return real, ((vx, vm) if len(vx) else None)


# --------------------------------------------------------------------------
# commands; each returns a metrics dict and writes into run_dir

def cmd_gen_data(args, cfg, run_dir, manifest):
    corpus = _make_dataset(cfg)
    sio.save_dataset(corpus, run_dir / "data")
    m = corpus.manifest
    return {"items": len(m.items), **{k: len(m.split(k)) for k in
                                       ("annotated_train", "annotated_val", "style_source", "test")}}


def cmd_train_diffusion(args, cfg, run_dir, manifest):
    corpus = sio.load_dataset(args.data)
    ckpt_dir = run_dir / "checkpoints"

    def save(epoch, model, name=None):
        path = ckpt_dir / (name or f"epoch-{epoch + 1:03d}.npz")
        meta = {"type": "stedm", "train_config": vars(model.config), "losses": model.losses}
        sio.save_checkpoint(path, model.state_arrays(), meta)
        manifest.checkpoints.append(str(path.relative_to(run_dir)))

    model = train_stedm(corpus, cfg.diffusion, on_epoch=save)
    save(0, model, "model.npz")
    with open(run_dir / "losses.tsv", "w", encoding="utf-8") as fh:
        fh.write("epoch\tloss\tdrop_fraction\n")
        for i, (l, d) in enumerate(zip(model.losses, model.drop_fractions)):
            fh.write(f"{i + 1}\t{l:.8f}\t{d:.6f}\n")
    return {"first_loss": model.losses[0], "final_loss": model.losses[-1]}


def cmd_sample(args, cfg, run_dir, manifest):
    corpus = sio.load_dataset(args.data)
    model = _load_stedm(args.checkpoint)
    g = cfg.generation
    rng = np.random.default_rng(cfg.seed)
    hue = (g.hue_lo, g.hue_hi) if g.hue_lo >= 0 and g.hue_hi >= 0 else None
    strat = g.strategy or (model.config.strategy if model.styled else "multipatch")
    req = GenerationRequest(layout_source=layout_bank(corpus, 2000, model.config.patch_size, rng),
                            style_pool=style_pool_for(corpus, hue), strategy=strat, n_style=g.n_style,
                            steps=g.steps, guidance_scale=g.guidance_scale, count=g.count, seed=cfg.seed,
                            batch_size=g.batch_size, augment_layouts=g.augment_layouts)
    samples = generate_synthetic(model, req)
    _save_synthetic(run_dir / "synthetic.npz", samples, corpus)
    return {"count": len(samples)}


def cmd_train_seg(args, cfg, run_dir, manifest):
    corpus = sio.load_dataset(args.data)
    rng = np.random.default_rng(cfg.seed)
    real, val = _real_patches(corpus, cfg, rng)
    synthetic = None
    if args.synthetic:
        samples = _load_synthetic(args.synthetic)
        synthetic = (np.stack([s.image for s in samples]), np.stack([s.mask for s in samples]))
    res = train_segmentation(real, synthetic, cfg.segmentation, val=val)
    sc = cfg.segmentation
    arrays = {k: v.detach().cpu().numpy() for k, v in res.model.state_dict().items()}
    path = sio.save_checkpoint(run_dir / "seg.npz", arrays,
                               {"type": "seg", "depth": sc.depth, "base_channels": sc.base_channels})
    manifest.checkpoints.append(str(path.relative_to(run_dir)))
    with open(run_dir / "val_losses.tsv", "w", encoding="utf-8") as fh:
        fh.write("epoch\ttrain_loss\tval_loss\n")
        for i, (a, b) in enumerate(zip(res.train_losses, res.val_losses)):
            fh.write(f"{i + 1}\t{a:.8f}\t{b:.8f}\n")
    return {"best_epoch": res.best_epoch, "best_val_loss": min(res.val_losses),
            "synthetic_fraction": res.synthetic_fraction}


def cmd_eval_gen(args, cfg, run_dir, manifest):
    corpus = sio.load_dataset(args.data)
    samples = _load_synthetic(args.synthetic)
    report = evaluate_generation(corpus, samples, seed=cfg.seed, with_fid=not args.no_fid)
    return report.as_dict()


def cmd_eval_seg(args, cfg, run_dir, manifest):
    corpus = sio.load_dataset(args.data)
    model = _load_seg(args.checkpoint)
    if isinstance(corpus, SlideCohort):
        slides = corpus.split_slides("test")
        if not slides:
            raise DataError("cohort has no test slides")
        mean, var, per = evaluate_on_slides(model, slides, cfg.diffusion.patch_size)
    else:
        if isinstance(corpus, ShapesCorpus):
            idx = corpus.index("test")
            x, m = corpus.images[idx], corpus.masks[idx]
        else:
            x, m = corpus.annotated("annotated_val")
        if len(x) == 0:
            raise DataError("no evaluation items")
        with torch.no_grad():
            pred = seg_forward(model, to_nchw(x)).argmax(dim=1).numpy()
        mean, var = iou_stats(list(pred), list(m))
    return {"iou_mean": mean, "iou_variance": var}


def cmd_grid(args, cfg, run_dir, manifest):
    gc, d = cfg.grid, cfg.data
    rows = run_experiment_grid(
        gc.annotated, gc.strategies, gc.seeds, cfg.diffusion, cfg.segmentation,
        gen_steps=cfg.generation.steps, guidance_scale=cfg.generation.guidance_scale,
        n_style=cfg.generation.n_style, synthetic_count=gc.synthetic_count,
        cohort_kwargs={"patients": d.patients, "slide_size": d.slide_size,
                       "test_patients": d.test_patients, "val_patients": d.val_patients},
        progress=lambda r: log.info("grid row %s", r))
    write_tsv(rows, RESULT_COLUMNS, run_dir / "results.tsv")
    summary = summarize_grid(rows)
    write_tsv(summary, SUMMARY_COLUMNS, run_dir / "summary.tsv")
    (run_dir / "plots").mkdir(exist_ok=True)
    (run_dir / "plots" / "mean_iou.txt").write_text(text_bar_plot(rows), encoding="utf-8")
    return {"rows": len(rows)}


COMMANDS = {
    "gen-data": cmd_gen_data, "train-diffusion": cmd_train_diffusion, "sample": cmd_sample,
    "train-seg": cmd_train_seg, "eval-gen": cmd_eval_gen, "eval-seg": cmd_eval_seg, "grid": cmd_grid,
}

def execute(args, cfg: RunConfig, out_root: Path) -> Path:
    inputs = _inputs(args)
    argv = _argv_for_manifest(args)
    key = json.dumps({"argv": argv, "config": cfg.to_text(),
                      "inputs": {k: v["sha256"] for k, v in inputs.items()}}, sort_keys=True)
    run_id = hashlib.sha256(key.encode()).hexdigest()[:12]
    with sio.dir_lock(out_root):
        run_dir = out_root / f"{args.command}-{run_id}"
        run_dir.mkdir(parents=True, exist_ok=True)
        manifest = sio.RunManifest(command=args.command, config_text=cfg.to_text(),
                                   config_hash=cfg.hash(), seeds={"run": cfg.seed},
                                   inputs={**inputs, "argv": argv})
        log.info("run %s seed %d -> %s", args.command, cfg.seed, run_dir)
        torch.manual_seed(cfg.seed)
        manifest.metrics = COMMANDS[args.command](args, cfg, run_dir, manifest)
        manifest.record_tree(run_dir)
        manifest.finished = sio._now()
        manifest.save(run_dir)
        (run_dir / "metrics.json").write_text(json.dumps(manifest.metrics, indent=1, sort_keys=True),
                                              encoding="utf-8")
    print(run_dir)
    return run_dir


def replay(manifest_path, out_root: Path) -> Path:
    """Re-run a recorded invocation with its stored config."""
    m = sio.RunManifest.load(manifest_path)
    cfg = parse_config(m.config_text)
    args = build_parser().parse_args(m.inputs["argv"] + ["--out", str(out_root)])
    return execute(args, cfg, out_root)


def main(argv: Optional[list] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s",
                        stream=sys.stderr)
    torch.use_deterministic_algorithms(True)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    try:
        if args.command == "replay":
            replay(args.manifest, Path(args.out))
        else:
            cfg = resolve_config(args)
            execute(args, cfg, Path(args.out))
    except StedmError as exc:
        print(f"stedm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # last resort: runtime failure
        log.exception("unexpected failure")
        print(f"stedm: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
