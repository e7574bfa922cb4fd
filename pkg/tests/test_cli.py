import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stedm import io as sio
from stedm.cli import main
from stedm.config import RunConfig, load_config, parse_config
from stedm.errors import ConfigError, DataError
from stedm.synth import gen_shapes_dataset, gen_slide_cohort

TINY = """
[run]
schema_version = 1
seed = 3

[data]
kind = cohort
patients = 6
slide_size = 96
annotated = 2
test_patients = 2

[diffusion]
epochs = 2
samples_per_epoch = 64
batch_size = 32
base_channels = 8
time_embed_dim = 16
style_dim = 16
T = 100
strategy = multipatch
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
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out.strip(), out.err


class TestConfig:
    def test_empty_is_defaults(self):
        assert parse_config("").to_text() == RunConfig().to_text()

    def test_round_trip(self):
        cfg = parse_config(TINY)
        again = parse_config(cfg.to_text())
        assert again == cfg and again.hash() == cfg.hash()
        assert cfg.seed == 3 and cfg.diffusion.seed == 3 and cfg.segmentation.seed == 3

    @given(st.integers(0, 2 ** 31 - 2), st.integers(1, 500), st.floats(0, 10, allow_nan=False),
           st.lists(st.integers(1, 64), min_size=1, max_size=4))
    @settings(max_examples=40, deadline=None)
    def test_round_trip_property(self, seed, epochs, scale, annotated):
        cfg = parse_config("", {"run.seed": seed, "diffusion.epochs": epochs,
                                "generation.guidance_scale": repr(scale),
                                "grid.annotated": ", ".join(map(str, annotated))})
        again = parse_config(cfg.to_text())
        assert again == cfg
        assert again.grid.annotated == annotated and again.generation.guidance_scale == scale

    @pytest.mark.parametrize("text", [
        "[bogus]\nx = 1\n",
        "[diffusion]\nwidth = 3\n",
        "[diffusion]\nseed = 3\n",
        "[run]\nschema_version = 2\n",
        "[diffusion]\nepochs = many\n",
        "[diffusion]\nepochs = 0\n",
        "[diffusion]\nstrategy = random\n",
        "[segmentation]\nw_ce = 0.5\n",
        "[generation]\naugment_layouts = perhaps\n",
        "not an ini file",
    ])
    def test_rejections(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.ini")


class TestIo:
    def test_checkpoint_round_trip(self, tmp_path):
        arrays = {"a": np.arange(6, dtype=">f4").reshape(2, 3), "b": np.ones(3, np.int64)}
        sio.save_checkpoint(tmp_path / "c.npz", arrays, {"k": [1, 2]})
        back, meta = sio.load_checkpoint(tmp_path / "c.npz")
        assert meta == {"k": [1, 2]}
        assert back["a"].dtype == np.dtype("<f4") and np.array_equal(back["a"], arrays["a"])
        assert np.array_equal(back["b"], arrays["b"])

    def test_checkpoint_rejects_garbage(self, tmp_path):
        (tmp_path / "x.npz").write_bytes(b"zzz")
        with pytest.raises(DataError):
            sio.load_checkpoint(tmp_path / "x.npz")
        np.savez(tmp_path / "y.npz", a=np.zeros(2))
        with pytest.raises(DataError):
            sio.load_checkpoint(tmp_path / "y.npz")

    def test_shapes_dataset_round_trip(self, tmp_path):
        c = gen_shapes_dataset(40, seed=2)
        back = sio.load_dataset(sio.save_dataset(c, tmp_path / "d"))
        assert back.manifest == c.manifest
        assert np.array_equal(back.masks, c.masks)
        # PNG storage quantises to 8 bits
        assert np.abs(back.images - c.images).max() <= 1 / 255 + 1e-6

    def test_cohort_dataset_round_trip(self, tmp_path):
        c = gen_slide_cohort(patients=5, slide_size=64, annotated=2, seed=0, test_patients=1)
        back = sio.load_dataset(sio.save_dataset(c, tmp_path / "d"))
        assert back.manifest == c.manifest
        for k, s in c.slides.items():
            assert np.array_equal(back.slides[k].layout_field, s.layout_field)
            assert np.array_equal(back.slides[k].tissue_field, s.tissue_field)
            assert back.slides[k].style_params == s.style_params

    def test_missing_dataset(self, tmp_path):
        with pytest.raises(DataError):
            sio.load_dataset(tmp_path)

    def test_lock_is_exclusive(self, tmp_path):
        with sio.dir_lock(tmp_path):
            with pytest.raises(sio.LockedError):
                with sio.dir_lock(tmp_path):
                    pass
        with sio.dir_lock(tmp_path):
            pass
        assert not (tmp_path / sio.LOCK_NAME).exists()

    def test_manifest_round_trip(self, tmp_path):
        m = sio.RunManifest("gen-data", "x", "h", {"run": 1}, metrics={"a": 1.5})
        (tmp_path / "f.txt").write_text("hi")
        m.record_tree(tmp_path)
        m.save(tmp_path)
        back = sio.RunManifest.load(tmp_path / "run.json")
        assert back == m and back.output_digest() == m.output_digest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data -> train-diffusion -> sample -> train-seg through the CLI entry point."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY)
    out = root / "runs"
    common = ["--config", cfg, "--out", out]
    dirs = {}
    assert main(["gen-data", *map(str, common)]) == 0
    dirs["data"] = next(out.glob("gen-data-*")) / "data"
    assert main(["train-diffusion", *map(str, common), "--data", str(dirs["data"])]) == 0
    dirs["diff"] = next(out.glob("train-diffusion-*"))
    assert main(["sample", *map(str, common), "--data", str(dirs["data"]),
                 "--checkpoint", str(dirs["diff"] / "checkpoints" / "model.npz")]) == 0
    dirs["sample"] = next(out.glob("sample-*"))
    assert main(["train-seg", *map(str, common), "--data", str(dirs["data"]),
                 "--synthetic", str(dirs["sample"] / "synthetic.npz")]) == 0
    dirs["seg"] = next(out.glob("train-seg-*"))
    dirs.update(root=root, cfg=cfg, out=out)
    return dirs


class TestCliPipeline:
    def test_outputs(self, pipeline):
        d = pipeline["diff"]
        assert sorted(p.name for p in (d / "checkpoints").iterdir()) == [
            "epoch-001.npz", "epoch-002.npz", "model.npz"]
        manifest = sio.RunManifest.load(d / "run.json")
        assert manifest.seeds == {"run": 3} and manifest.config_hash == parse_config(TINY).hash()
        assert set(manifest.artifacts) >= {"losses.tsv", "checkpoints/model.npz"}
        lines = (d / "losses.tsv").read_text().splitlines()
        assert lines[0] == "epoch\tloss\tdrop_fraction" and len(lines) == 3
        with np.load(pipeline["sample"] / "synthetic.npz") as z:
            assert z["images"].shape == (8, 16, 16, 3) and z["images"].dtype == np.uint8
            assert len(json.loads(str(z["refs"][0]))) == 3

    def test_eval_commands(self, pipeline, capsys):
        code, out, _ = run(capsys, "eval-seg", "--config", pipeline["cfg"], "--out", pipeline["out"],
                           "--data", pipeline["data"], "--checkpoint", pipeline["seg"] / "seg.npz")
        assert code == 0
        metrics = json.loads((Path(out) / "metrics.json").read_text())
        assert set(metrics) == {"iou_mean", "iou_variance"}
        code, out, _ = run(capsys, "eval-gen", "--config", pipeline["cfg"], "--out", pipeline["out"],
                           "--data", pipeline["data"], "--synthetic", pipeline["sample"] / "synthetic.npz",
                           "--no-fid")
        assert code == 0

    def test_replay_is_bitwise(self, pipeline, tmp_path, capsys):
        code, out, _ = run(capsys, "replay", pipeline["diff"] / "run.json", "--out", tmp_path)
        assert code == 0
        a = sio.RunManifest.load(pipeline["diff"] / "run.json")
        b = sio.RunManifest.load(tmp_path / pipeline["diff"].name / "run.json")
        assert a.output_digest() == b.output_digest() and a.artifacts == b.artifacts

    def test_same_invocation_same_directory(self, pipeline, capsys):
        code, out, _ = run(capsys, "gen-data", "--config", pipeline["cfg"], "--out", pipeline["out"])
        assert code == 0 and out.endswith(pipeline["data"].parent.name)

    def test_wrong_checkpoint_kind(self, pipeline, capsys):
        code, _, err = run(capsys, "sample", "--config", pipeline["cfg"], "--out", pipeline["out"],
                           "--data", pipeline["data"], "--checkpoint", pipeline["seg"] / "seg.npz")
        assert code == 4 and "not a diffusion checkpoint" in err

    def test_locked_output(self, pipeline, capsys):
        with sio.dir_lock(pipeline["out"]):
            code, _, err = run(capsys, "gen-data", "--config", pipeline["cfg"], "--out", pipeline["out"])
        assert code == 5 and "in use" in err


class TestExitCodes:
    def test_usage(self, capsys):
        assert run(capsys, "no-such-command")[0] == 2
        assert run(capsys, "train-diffusion")[0] == 2  # --data missing
        assert run(capsys, "gen-data", "--count", "many")[0] == 2
        assert run(capsys)[0] == 2

    def test_help_is_success(self, capsys):
        assert run(capsys, "--help")[0] == 0

    def test_validation(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen-data", "--out", tmp_path, "--set", "diffusion.epochs=0")
        assert code == 3 and "epochs" in err
        assert run(capsys, "gen-data", "--out", tmp_path, "--set", "nonsense")[0] == 3
        assert run(capsys, "gen-data", "--out", tmp_path, "--config", tmp_path / "missing.ini")[0] == 3
        assert run(capsys, "gen-data", "--out", tmp_path, "--kind", "folder")[0] == 3

    def test_data(self, tmp_path, capsys):
        code, _, err = run(capsys, "train-diffusion", "--out", tmp_path, "--data", tmp_path / "absent")
        assert code == 4 and "absent" in err
        empty = tmp_path / "empty"
        empty.mkdir()
        assert run(capsys, "gen-data", "--out", tmp_path, "--kind", "folder",
                   "--images-dir", empty)[0] == 4

    def test_console_script(self, tmp_path):
        res = subprocess.run([sys.executable, "-m", "stedm", "gen-data", "--out", str(tmp_path),
                              "--count", "40"], capture_output=True, text=True)
        assert res.returncode == 0
        run_dir = res.stdout.strip()
        assert (tmp_path / run_dir.split("/")[-1] / "data" / "manifest.json").is_file()
        bad = subprocess.run([sys.executable, "-m", "stedm", "sample"], capture_output=True, text=True)
        assert bad.returncode == 2 and "usage" in bad.stderr
