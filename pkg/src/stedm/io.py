"""On-disk formats: checkpoints, datasets, run manifests and directory locks.

Checkpoint
    ``.npz`` archive of named little-endian numeric arrays. Two reserved
    entries: ``__schema__`` (int64 scalar, :data:`CHECKPOINT_SCHEMA`) and
    ``__meta__`` (UTF-8 JSON as a uint8 array).

Dataset directory
    ``manifest.json`` (:class:`~stedm.synth.SplitManifest`) plus 8-bit PNGs.
    Shapes: ``images/<id>.png`` and ``masks/<id>.png`` (0/255).
    Cohort: ``slides/<id>.png``, ``layouts/<id>.png`` and ``tissue/<id>.png``.
    Folder: only the manifest; pixels stay where the manifest points.

Run manifest
    ``run.json`` in every run directory: command, config text and hash,
    seeds, inputs, checkpoint paths, every artifact with its sha256,
    metrics and timestamps.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import DataError, StedmError
from .synth import (SHAPE_CLASSES, ShapesCorpus, SlideCohort, SplitManifest, SyntheticSlide, from_uint8,
                    ingest_folder, to_uint8)

CHECKPOINT_SCHEMA = 1
RUN_SCHEMA = 1


# --------------------------------------------------------------------------
# checkpoints

def _little_endian(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype.byteorder == ">" or (a.dtype.byteorder == "=" and not np.little_endian):
        a = a.astype(a.dtype.newbyteorder("<"))
    return a


def save_checkpoint(path, arrays: dict, meta: Optional[dict] = None) -> Path:
    path = Path(path)
    for key in arrays:
        if key.startswith("__"):
            raise StedmError(f"array name {key!r} is reserved")
    out = {k: _little_endian(v) for k, v in arrays.items()}
    out["__schema__"] = np.array(CHECKPOINT_SCHEMA, dtype="<i8")
    out["__meta__"] = np.frombuffer(json.dumps(meta or {}, sort_keys=True).encode("utf-8"), np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **out)
    return path


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns ``(arrays, meta)``."""
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    if "__schema__" not in data or int(data["__schema__"]) != CHECKPOINT_SCHEMA:
        raise DataError(f"{path} is not a version-{CHECKPOINT_SCHEMA} checkpoint")
    meta = json.loads(data.pop("__meta__").tobytes().decode("utf-8"))
    data.pop("__schema__")
    return data, meta


# --------------------------------------------------------------------------
# datasets

def _write_png(path: Path, arr: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def _read_png(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode), dtype=np.uint8)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def save_dataset(corpus, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    m = corpus.manifest
    if m.kind == "shapes":
        for item in sorted(m.items):
            idx = int(item.split("-")[1])
            _write_png(d / "images" / f"{item}.png", to_uint8(corpus.images[idx]))
            _write_png(d / "masks" / f"{item}.png", corpus.masks[idx] * np.uint8(255))
    elif m.kind == "cohort":
        for sid, s in corpus.slides.items():
            _write_png(d / "slides" / f"{sid}.png", to_uint8(s.pixels))
            _write_png(d / "layouts" / f"{sid}.png", s.layout_field.astype(np.uint8) * np.uint8(255))
            _write_png(d / "tissue" / f"{sid}.png", s.tissue_field.astype(np.uint8) * np.uint8(255))
    (d / "manifest.json").write_text(m.to_json(), encoding="utf-8")
    return d


def load_dataset(directory):
    d = Path(directory)
    try:
        manifest = SplitManifest.from_json((d / "manifest.json").read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"no dataset manifest in {d}: {exc}") from None
    if manifest.kind == "shapes":
        ids = sorted(manifest.items)
        n = len(ids)
        if [int(i.split("-")[1]) for i in ids] != list(range(n)):
            raise DataError("shapes item ids are not contiguous")
        images = np.stack([from_uint8(_read_png(d / "images" / f"{i}.png", "RGB")) for i in ids])
        masks = np.stack([(_read_png(d / "masks" / f"{i}.png", "L") > 127).astype(np.uint8) for i in ids])
        hues = np.array([manifest.items[i]["hue_deg"] for i in ids])
        classes = np.array([SHAPE_CLASSES.index(manifest.items[i]["shape_class"]) for i in ids])
        return ShapesCorpus(manifest, images, masks, hues, classes)
    if manifest.kind == "cohort":
        slides = {}
        for sid, meta in manifest.items.items():
            pixels = from_uint8(_read_png(d / "slides" / f"{sid}.png", "RGB"))
            layout = (_read_png(d / "layouts" / f"{sid}.png", "L") > 127).astype(np.uint8)
            tissue = _read_png(d / "tissue" / f"{sid}.png", "L") > 127
            slides[sid] = SyntheticSlide(sid, pixels, layout, tissue, sid, meta["style_params"])
        return SlideCohort(manifest, slides)
    if manifest.kind == "folder":
        p = manifest.params
        return ingest_folder(p["images_dir"], p["masks_dir"], p["patch_size"], p["val_fraction"],
                             manifest.seed)
    raise DataError(f"unknown dataset kind {manifest.kind!r}")


# --------------------------------------------------------------------------
# run manifests

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_text: str
    config_hash: str
    seeds: dict
    inputs: dict = field(default_factory=dict)
    checkpoints: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)  # relative path -> sha256
    metrics: dict = field(default_factory=dict)
    started: str = field(default_factory=_now)
    finished: Optional[str] = None
    schema_version: int = RUN_SCHEMA

    def record(self, run_dir, path) -> str:
        rel = str(Path(path).relative_to(run_dir))
        self.artifacts[rel] = sha256_file(path)
        return rel

    def record_tree(self, run_dir, sub=None):
        root = Path(run_dir) / sub if sub else Path(run_dir)
        for p in sorted(root.rglob("*")):
            if p.is_file() and p.name not in ("run.json", LOCK_NAME):
                self.record(run_dir, p)

    def save(self, run_dir) -> Path:
        path = Path(run_dir) / "run.json"
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read run manifest {path}: {exc}") from None
        if data.get("schema_version") != RUN_SCHEMA:
            raise DataError(f"unsupported run manifest schema {data.get('schema_version')}")
        return cls(**data)

    def output_digest(self) -> str:
        """Hash over artifact hashes; identical reruns give identical digests."""
        h = hashlib.sha256()
        for k in sorted(self.artifacts):
            h.update(f"{k}\t{self.artifacts[k]}\n".encode("utf-8"))
        return h.hexdigest()


# --------------------------------------------------------------------------
# locking

LOCK_NAME = ".stedm.lock"


class LockedError(StedmError):
    exit_code = 5


@contextmanager
def dir_lock(directory):
    """Exclusive lock on an output directory via an O_EXCL lock file."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lock = d / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockedError(f"{d} is in use by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield d
    finally:
        try:
            lock.unlink()
        except FileNotFoundError:
            pass
