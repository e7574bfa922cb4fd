"""End-to-end acceptance checks A1 to A9.

Each test records a one-line PASS/FAIL verdict (printed in the terminal
summary) before asserting. The training-based checks (A3 to A7) run at toy
scale on one CPU core and take most of the suite's time.
"""

import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest
import torch

from stedm import io as sio
from stedm.cli import main
from stedm.diffusion import (ConditionBundle, build_schedule, cfg_combine, ddim_generate, diffusion_loss,
                             forward_diffuse)
from stedm.metrics import fid, fid_from_moments, inception_score, iou_stats, layout_adherence, style_fidelity
from stedm.pipelines import (SegTrainConfig, TrainConfig, format_cell, generate_from_queries, run_experiment_grid,
                             summarize_grid, train_stedm)
from stedm.sampling import apply_affine, random_affine, random_tissue_patch, sample_inference_styles, sample_multipatch
from stedm.segmentation import seg_loss
from stedm.style import Aggregator, StyleQuerySet, aggregate
from stedm.synth import CohortParams, circular_mean_deg, gen_shapes_dataset, gen_slide_cohort, hue_distance

from oracles import iou_counting_oracle, mlp_loop_oracle, mse_loop, oracle_denoiser, seg_loss_loop_oracle

HOLDOUT = (200.0, 300.0)
N_SAMPLES = 200


def toy_cfg(strategy, **kw):
    base = dict(batch_size=64, lr=1e-3, strategy=strategy, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# --------------------------------------------------------------------------
# A1 / A2: math and metric oracles

def test_a1_diffusion_math(acceptance_log):
    start = time.time()
    checks = {}
    s = build_schedule(1000)
    ab = np.asarray(s.alpha_bars, np.float64)
    checks["monotone"] = bool(np.all(np.diff(ab) < 0) and ab[0] < 1 and ab[-1] > 0)

    x0 = torch.rand(2, 3, 8, 8, generator=torch.Generator().manual_seed(5)) * 2 - 1
    lay = torch.zeros(2, 2, 8, 8)
    lay[:, 0] = 1
    errs = {}
    for steps in (8, 32, 128):
        out = ddim_generate(oracle_denoiser(x0, s), ConditionBundle(lay), steps, 1.5, 0, s)
        errs[steps] = float((out - x0).abs().max())
    checks["ddim"] = max(errs.values()) <= 1e-4

    n, t = 10_000, 300
    target = torch.tensor([0.7, -0.3, 1.2])
    eps = torch.randn(n, 3, generator=torch.Generator().manual_seed(0))
    xt = forward_diffuse(target.expand(n, 3), torch.full((n,), t), eps, s).double()
    a = float(s.alpha_bar(t))
    mean_ok = torch.all((xt.mean(0) - math.sqrt(a) * target.double()).abs() < 3 * math.sqrt((1 - a) / n))
    var_ok = torch.all((xt.var(0) - (1 - a)).abs() < 3 * (1 - a) * math.sqrt(2 / (n - 1)))
    checks["monte_carlo"] = bool(mean_ok and var_ok)

    u, c = torch.randn(4, 3), torch.randn(4, 3)
    checks["cfg"] = torch.equal(cfg_combine(u, c, 0.0), u) and torch.equal(cfg_combine(u, c, 1.0), c)
    elapsed = time.time() - start
    ok = all(checks.values()) and elapsed < 120
    acceptance_log("A1", ok, f"checks={checks} ddim_max_err={max(errs.values()):.2e} time={elapsed:.1f}s")
    assert ok


def test_a2_loss_and_metric_oracles(acceptance_log):
    start = time.time()
    checks = {}
    gen = torch.Generator().manual_seed(1)
    a, b = torch.randn(2, 4, 16, 16, generator=gen), torch.randn(2, 4, 16, 16, generator=gen)
    checks["diffusion_loss"] = abs(float(diffusion_loss(a, b)) - mse_loop(a, b)) <= 1e-6

    probs = torch.softmax(torch.randn(2, 2, 8, 8, generator=gen), dim=1)
    gt = (torch.rand(2, 8, 8, generator=gen) < 0.4).long()
    checks["seg_loss"] = abs(float(seg_loss(probs, gt)) - seg_loss_loop_oracle(probs, gt)) <= 1e-6

    rng = np.random.default_rng(0)
    preds = [rng.random((16, 16)) < 0.4 for _ in range(20)]
    gts = [rng.random((16, 16)) < 0.3 for _ in range(20)]
    ious = [iou_counting_oracle(p, g) for p, g in zip(preds, gts)]
    mean, var = iou_stats(preds, gts)
    mu = sum(ious) / len(ious)
    checks["iou_stats"] = (abs(mean - 100 * mu) <= 1e-9
                           and abs(var - sum((i - mu) ** 2 for i in ious) / len(ious)) <= 1e-9)

    torch.manual_seed(0)
    agg = Aggregator(32)
    vs = [torch.randn(32, generator=torch.Generator().manual_seed(i)) for i in range(10)]
    got = aggregate(vs, agg).double().tolist()
    want = mlp_loop_oracle(agg, [v.double().tolist() for v in vs])
    checks["aggregate"] = max(abs(p - q) for p, q in zip(got, want)) <= 1e-6

    checks["fid_1d"] = abs(fid_from_moments([0.0], [[1.0]], [1.0], [[1.0]]) - 1.0) <= 1e-12
    from scipy import linalg
    mu1, mu2 = np.zeros(4), np.array([0.5, -0.2, 0.1, 0.3])
    m = rng.normal(size=(4, 4))
    s1, s2 = m @ m.T / 4 + np.eye(4), np.diag([1.5, 0.7, 1.0, 2.0])
    exact = (np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2)
             - 2 * np.trace(linalg.sqrtm(s1 @ s2)).real)
    sampled = fid(rng.multivariate_normal(mu1, s1, 10_000), rng.multivariate_normal(mu2, s2, 10_000))
    checks["fid_4d"] = abs(sampled - exact) <= 0.05 * exact

    k = 5
    checks["is_onehot"] = abs(inception_score(np.eye(k)[np.arange(100) % k]) - k) <= 1e-9
    elapsed = time.time() - start
    ok = all(checks.values()) and elapsed < 120
    acceptance_log("A2", ok, f"checks={checks} fid_4d={sampled:.4f} vs {exact:.4f} time={elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# A3: loss descent per strategy

@pytest.fixture(scope="module")
def a3_cohort():
    return gen_slide_cohort(patients=12, slide_size=256, annotated=4, seed=0, test_patients=2)


@pytest.mark.parametrize("strategy", ["augmented", "nearby", "multipatch", "none"])
def test_a3_training_descent(strategy, a3_cohort, acceptance_log):
    start = time.time()
    model = train_stedm(a3_cohort, toy_cfg(strategy, epochs=5, samples_per_epoch=2000, n_style=10))
    elapsed = time.time() - start
    first, last = model.losses[0], model.losses[-1]
    ok = last < 0.5 * first and elapsed <= 20 * 60
    acceptance_log(f"A3[{strategy}]", ok,
                   f"loss {first:.4f} -> {last:.4f} (ratio {last / first:.3f}) time={elapsed:.0f}s")
    assert ok


# --------------------------------------------------------------------------
# A4 / A5: zero-shot hue recovery and layout adherence on shapes

@pytest.fixture(scope="module")
def shapes_run():
    start = time.time()
    corpus = gen_shapes_dataset(4000, hue_holdout=HOLDOUT, seed=0)
    held_out = corpus.style_pool(HOLDOUT)
    layouts = corpus.annotated()[1]
    rng = np.random.default_rng(1)
    masks = np.stack([apply_affine(layouts[rng.integers(len(layouts))], random_affine(rng))
                      for _ in range(N_SAMPLES)]).astype(np.uint8)
    queries = [sample_inference_styles(held_out, "augmented", 1, rng) for _ in range(N_SAMPLES)]
    hues = [float(corpus.hues[int(q.refs[0].split("-")[1])]) for q in queries]
    out = {"masks": masks, "hues": hues}
    for strategy in ("augmented", "none"):
        model = train_stedm(corpus, toy_cfg(strategy, epochs=30, samples_per_epoch=4000, n_style=1))
        imgs = []
        for i in range(0, N_SAMPLES, 100):
            q = queries[i:i + 100] if model.styled else None
            imgs.append(generate_from_queries(model, masks[i:i + 100], q, steps=128, scale=1.5, seed=i))
        out[strategy] = np.concatenate(imgs)
    out["time"] = time.time() - start
    return out


def test_a4_zero_shot_style_recovery(shapes_run, acceptance_log):
    assert all(HOLDOUT[0] <= h < HOLDOUT[1] for h in shapes_run["hues"])
    styled = style_fidelity(list(shapes_run["augmented"]), shapes_run["hues"], list(shapes_run["masks"]))
    base = style_fidelity(list(shapes_run["none"]), shapes_run["hues"], list(shapes_run["masks"]))
    ok = styled.fraction >= 0.70 and base.fraction <= 0.20 and shapes_run["time"] <= 30 * 60
    acceptance_log("A4", ok, f"held-out fidelity styled={styled.fraction:.3f} (need >=0.70) "
                             f"baseline={base.fraction:.3f} (need <=0.20) "
                             f"median err {np.median(styled.hue_errors):.1f} deg time={shapes_run['time']:.0f}s")
    assert ok


def test_a5_layout_adherence(shapes_run, acceptance_log):
    imgs, masks = shapes_run["augmented"], shapes_run["masks"]
    iou = layout_adherence(imgs, masks)
    shuffled = layout_adherence(imgs, masks[np.random.default_rng(0).permutation(len(masks))])
    ok = iou >= 0.70 and shuffled < iou
    acceptance_log("A5", ok, f"median oracle IoU {iou:.3f} (need >=0.70), shuffled control {shuffled:.3f}")
    assert ok


# --------------------------------------------------------------------------
# A6: multi-patch composition vs single tumour-free queries

def _tumour_patch(slide, rng, want_tumour, size=16, tries=2000):
    for _ in range(tries):
        ref = random_tissue_patch(slide, size, rng)
        frac = slide.layout_patch(ref).mean()
        if (frac > 0.3) if want_tumour else (frac == 0):
            return ref
    raise AssertionError(f"no suitable patch on {slide.slide_id}")


def test_a6_multipatch_composition(acceptance_log):
    start = time.time()
    # tolerance + twice the per-patient spread: a model that falls back to the
    # training hues cannot land within tolerance of any style-source hue
    params = CohortParams(hue_shift=30.0 + 2 * CohortParams().hue_spread)
    cohort = gen_slide_cohort(patients=30, slide_size=256, annotated=4, seed=0, test_patients=4, params=params)
    rng = np.random.default_rng(5)
    ann = cohort.annotated("annotated_train")
    masks = []
    while len(masks) < N_SAMPLES:
        s = ann[rng.integers(len(ann))]
        m = s.layout_patch(random_tissue_patch(s, 16, rng))
        if 0.2 <= m.mean() <= 0.8:
            masks.append(m.copy())
    masks = np.stack(masks).astype(np.uint8)

    sources = cohort.split_slides("style_source")
    mixed, tumour_free, hues = [], [], []
    for _ in range(N_SAMPLES):
        s = sources[rng.integers(len(sources))]
        hues.append(s.style_params["hue_deg"])
        refs = list(sample_multipatch(s, 10, rng, 16).refs)
        frac = [s.layout_patch(r).mean() for r in refs]
        if not any(f > 0.3 for f in frac):
            refs[0] = _tumour_patch(s, rng, True)
        if not any(f == 0 for f in frac):
            refs[1] = _tumour_patch(s, rng, False)
        mixed.append(StyleQuerySet(np.stack([s.patch(r) for r in refs]), refs=refs))
        bg = _tumour_patch(s, rng, False)
        tumour_free.append(StyleQuerySet(s.patch(bg)[None], refs=[bg]))

    centre = circular_mean_deg(np.array([t.style_params["hue_deg"] for t in ann]))
    fallback = float(np.mean(hue_distance(np.array(hues), centre) <= 30.0))

    fidelity = {}
    for strategy, queries in (("multipatch", mixed), ("nearby", tumour_free)):
        model = train_stedm(cohort, toy_cfg(strategy, epochs=15, samples_per_epoch=3000, n_style=10))
        imgs = np.concatenate([generate_from_queries(model, masks[i:i + 100], queries[i:i + 100], 128, 1.5, i)
                               for i in range(0, N_SAMPLES, 100)])
        fidelity[strategy] = style_fidelity(list(imgs), hues, list(masks)).fraction
    elapsed = time.time() - start
    ok = fidelity["multipatch"] >= fidelity["nearby"] and fidelity["nearby"] < 0.3
    acceptance_log("A6", ok, f"tumour fidelity multipatch={fidelity['multipatch']:.3f} "
                             f">= nearby(tumour-free)={fidelity['nearby']:.3f}, nearby < 0.3; "
                             f"pure fallback would score {fallback:.3f}; time={elapsed:.0f}s")
    assert fallback < 0.3
    assert ok


# --------------------------------------------------------------------------
# A7: semi-supervised direction on a style-shifted test cohort

def test_a7_semi_supervised_direction(acceptance_log, tmp_path):
    start = time.time()
    train = toy_cfg("multipatch", epochs=10, samples_per_epoch=2000, n_style=10)
    seg = SegTrainConfig(epochs=30, samples_per_epoch=2000, lr=1e-3, depth=2, base_channels=16)
    rows = run_experiment_grid([4], ["real_only", "multipatch"], seeds=[0, 1, 2, 3, 4], train_cfg=train,
                               seg_cfg=seg, gen_steps=50, synthetic_count=600, real_count=1000,
                               cohort_kwargs={"patients": 30, "slide_size": 256, "test_patients": 6})
    elapsed = time.time() - start
    summary = {r["strategy"]: r for r in summarize_grid(rows)}

    def mean_of(strategy, key):
        return float(np.mean([r[key] for r in rows if r["strategy"] == strategy]))

    base_iou, syn_iou = mean_of("real_only", "iou_mean"), mean_of("multipatch", "iou_mean")
    base_var, syn_var = mean_of("real_only", "iou_var_x100"), mean_of("multipatch", "iou_var_x100")
    ok = syn_iou >= base_iou and syn_var <= base_var and elapsed <= 45 * 60
    table = "; ".join(f"{k}: IoU {v['mean_iou']} var {v['iou_variance']}" for k, v in summary.items())
    acceptance_log("A7", ok, f"{table}; time={elapsed:.0f}s")
    assert summary["real_only"]["mean_iou"] == format_cell([r["iou_mean"] for r in rows
                                                             if r["strategy"] == "real_only"])
    assert ok


# --------------------------------------------------------------------------
# A8 / A9: determinism and CLI contract

A8_CONFIG = """
[run]
seed = 4

[data]
kind = cohort
patients = 6
slide_size = 96
annotated = 2
test_patients = 2

[diffusion]
epochs = 2
samples_per_epoch = 64
base_channels = 8
time_embed_dim = 16
style_dim = 16
T = 100
n_style = 3

[generation]
count = 8
steps = 4
n_style = 3

[segmentation]
epochs = 2
samples_per_epoch = 64
depth = 2
base_channels = 8

[grid]
annotated = 2
strategies = real_only, multipatch
seeds = 0
synthetic_count = 16
"""


def test_a8_rerun_from_manifest_is_identical(tmp_path, acceptance_log):
    cfg = tmp_path / "a8.ini"
    cfg.write_text(A8_CONFIG)
    out, again = tmp_path / "first", tmp_path / "second"
    common = ["--config", str(cfg), "--out", str(out)]
    assert main(["gen-data", *common]) == 0
    data = next(out.glob("gen-data-*")) / "data"
    assert main(["train-diffusion", *common, "--data", str(data)]) == 0
    ckpt = next(out.glob("train-diffusion-*")) / "checkpoints" / "model.npz"
    assert main(["sample", *common, "--data", str(data), "--checkpoint", str(ckpt)]) == 0
    syn = next(out.glob("sample-*")) / "synthetic.npz"
    assert main(["train-seg", *common, "--data", str(data), "--synthetic", str(syn)]) == 0
    seg = next(out.glob("train-seg-*")) / "seg.npz"
    assert main(["eval-seg", *common, "--data", str(data), "--checkpoint", str(seg)]) == 0
    assert main(["eval-gen", *common, "--data", str(data), "--synthetic", str(syn), "--no-fid"]) == 0
    assert main(["grid", *common]) == 0

    mismatched = []
    runs = sorted(p for p in out.iterdir() if p.is_dir())
    for run_dir in runs:
        assert main(["replay", str(run_dir / "run.json"), "--out", str(again)]) == 0
        a = sio.RunManifest.load(run_dir / "run.json")
        b = sio.RunManifest.load(again / run_dir.name / "run.json")
        if a.output_digest() != b.output_digest() or a.metrics != b.metrics:
            mismatched.append(run_dir.name)
    grid_dir = next(out.glob("grid-*"))
    tables = [sio.sha256_file(d / "results.tsv") for d in (grid_dir, again / grid_dir.name)]
    ok = not mismatched and tables[0] == tables[1] and len(runs) == 7
    acceptance_log("A8", ok, f"{len(runs)} runs replayed, mismatched={mismatched}, "
                             f"results.tsv sha256 {tables[0][:12]} == {tables[1][:12]}")
    assert ok


def _cli(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "stedm", *map(str, args)], capture_output=True, text=True,
                          cwd=cwd)


def test_a9_cli_contract(tmp_path, acceptance_log):
    start = time.time()
    checks = {}
    checks["usage_unknown_command"] = _cli("frobnicate").returncode == 2
    checks["usage_unknown_flag"] = _cli("gen-data", "--no-such-flag").returncode == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[diffusion]\nepochs = -1\n")
    r = _cli("gen-data", "--config", bad, "--out", tmp_path)
    checks["validation_value"] = r.returncode == 3 and "epochs" in r.stderr
    bad.write_text("[diffusion]\nepoch = 3\n")
    r = _cli("gen-data", "--config", bad, "--out", tmp_path)
    checks["validation_unknown_key"] = r.returncode == 3 and "diffusion.epoch" in r.stderr
    r = _cli("train-diffusion", "--data", tmp_path / "nowhere", "--out", tmp_path)
    checks["data_error"] = r.returncode == 4

    r = _cli("gen-data", "--kind", "shapes", "--count", 1000, "--seed", 7, "--out", tmp_path / "runs")
    checks["gen_data_ok"] = r.returncode == 0
    run_dir = tmp_path / "runs" / r.stdout.strip().split("/")[-1]
    m = sio.RunManifest.load(run_dir / "run.json")
    resaved = tmp_path / "copy"
    resaved.mkdir()
    m.save(resaved)
    checks["manifest_round_trip"] = (sio.RunManifest.load(resaved / "run.json") == m
                                     and (resaved / "run.json").read_text() == (run_dir / "run.json").read_text())
    checks["manifest_hashes"] = all(sio.sha256_file(run_dir / k) == v for k, v in m.artifacts.items())
    checks["seed_logged"] = m.seeds == {"run": 7} and "seed = 7" in m.config_text
    manifest = json.loads((run_dir / "data" / "manifest.json").read_text())
    checks["dataset_manifest"] = len(manifest["items"]) == 1000
    elapsed = time.time() - start
    ok = all(checks.values()) and elapsed < 60
    acceptance_log("A9", ok, f"checks={checks} time={elapsed:.1f}s")
    assert ok
