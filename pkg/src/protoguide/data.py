"""Dataset ingestion: manifests, normalization, embeddings, annotation export.

A dataset is a directory with one subdirectory per class. Manifests pin the
seeded train/holdout selection; embedding extraction runs behind a pluggable
encoder port with a content-addressed disk cache.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
from PIL import Image

from .fileio import atomic_write_bytes, atomic_write_json, read_json

MANIFEST_SCHEMA_VERSION = 1
ANNOTATION_SCHEMA_VERSION = 1

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")

__all__ = [
    "DataError",
    "ImageRecord",
    "DatasetManifest",
    "build_manifest",
    "save_manifest",
    "load_manifest",
    "load_and_normalize",
    "normalize_pixels",
    "denormalize_to_uint8",
    "pixel_hash",
    "EncoderPort",
    "MeanPixelEncoder",
    "PixelProjectionEncoder",
    "make_encoder",
    "extract_embeddings",
    "export_annotation_manifest",
    "import_annotation_results",
]


class DataError(Exception):
    """Dataset or artifact content problem (missing files, bad layout, ...)."""


@dataclass
class ImageRecord:
    path: str
    class_id: int
    split: str                      # "train" or "holdout"
    pixel_hash: str | None = None


@dataclass
class DatasetManifest:
    records: list
    class_names: list               # index = class id
    source_tag: str = ""
    seed: int = 0

    def class_id_of(self, name: str) -> int:
        return self.class_names.index(name)

    def split_records(self, split: str) -> list:
        return [r for r in self.records if r.split == split]


def pixel_hash(path) -> str:
    """Hash of the decoded RGB pixels (not the file bytes)."""
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        h = hashlib.sha256()
        h.update(f"{rgb.width}x{rgb.height}".encode())
        h.update(rgb.tobytes())
    return h.hexdigest()


def build_manifest(root, per_class_n: int, holdout_per_class: int, seed: int,
                   source_tag: str = "", compute_hashes: bool = True) -> DatasetManifest:
    """Seeded per-class sampling without replacement into train/holdout splits.

    Class ids follow the sorted subdirectory names, and files are sorted
    before drawing, so the manifest is independent of listing order.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root not found: {root}")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DataError(f"no class subdirectories under {root}")
    rng = np.random.default_rng(seed)
    records = []
    class_names = []
    need = per_class_n + holdout_per_class
    for class_id, class_dir in enumerate(class_dirs):
        files = sorted(p for p in class_dir.iterdir()
                       if p.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise DataError(f"empty class directory: {class_dir.name}")
        if len(files) < need:
            raise DataError(
                f"class {class_dir.name!r} has {len(files)} images, needs {need}")
        picks = rng.choice(len(files), size=need, replace=False)
        class_names.append(class_dir.name)
        for j, k in enumerate(picks):
            path = files[int(k)]
            records.append(ImageRecord(
                path=str(path),
                class_id=class_id,
                split="train" if j < per_class_n else "holdout",
                pixel_hash=pixel_hash(path) if compute_hashes else None))
    return DatasetManifest(records=records, class_names=class_names,
                           source_tag=source_tag, seed=seed)


def save_manifest(manifest: DatasetManifest, path) -> None:
    atomic_write_json(path, {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "source_tag": manifest.source_tag,
        "seed": manifest.seed,
        "class_names": manifest.class_names,
        "records": [asdict(r) for r in manifest.records],
    })


def load_manifest(path) -> DatasetManifest:
    doc = read_json(path)
    if doc.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise DataError(f"unsupported manifest schema: {doc.get('schema_version')}")
    return DatasetManifest(
        records=[ImageRecord(**r) for r in doc["records"]],
        class_names=doc["class_names"],
        source_tag=doc.get("source_tag", ""),
        seed=doc.get("seed", 0))


def normalize_pixels(pixels: np.ndarray) -> np.ndarray:
    """Map 8-bit pixels to [-1, 1]."""
    return (pixels.astype(np.float32) / 127.5) - 1.0


def denormalize_to_uint8(x: np.ndarray) -> np.ndarray:
    """Inverse of normalize_pixels, rounding back onto the 8-bit grid."""
    return np.clip(np.round((np.asarray(x) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def load_and_normalize(record_or_path, target_size: int = 64) -> np.ndarray:
    """Decode as RGB, bilinear-resize to the target, scale to [-1, 1].

    Returns a float32 array shaped (3, target_size, target_size).
    """
    path = getattr(record_or_path, "path", record_or_path)
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            if rgb.size != (target_size, target_size):
                rgb = rgb.resize((target_size, target_size), Image.BILINEAR)
            arr = np.asarray(rgb, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return normalize_pixels(arr).transpose(2, 0, 1)


@runtime_checkable
class EncoderPort(Protocol):
    """Feature extractor contract: a PIL image in, a fixed-D vector out."""

    name: str
    dim: int

    def embed(self, image: Image.Image) -> np.ndarray: ...


class MeanPixelEncoder:
    """Per-channel mean of the normalized pixels; D = 3. Test/desk featurizer."""

    def __init__(self):
        self.name = "mean_pixel_v1"
        self.dim = 3

    def embed(self, image: Image.Image) -> np.ndarray:
        arr = normalize_pixels(np.asarray(image.convert("RGB"), dtype=np.uint8))
        return arr.mean(axis=(0, 1)).astype(np.float64)


class PixelProjectionEncoder:
    """Fixed random projection of a downsampled image to D dimensions.

    Deterministic stand-in for an external pretrained encoder: the projection
    matrix is derived from a fixed seed, so the same image always maps to the
    same vector and distances reflect pixel-space structure.
    """

    PROJECTION_SEED = 20240901

    def __init__(self, dim: int = 768, patch_size: int = 8):
        self.name = f"pixel_projection_{dim}_v1"
        self.dim = dim
        self.patch_size = patch_size
        rng = np.random.default_rng(self.PROJECTION_SEED)
        n_in = 3 * patch_size * patch_size
        self._matrix = rng.standard_normal((n_in, dim)) / np.sqrt(n_in)

    def embed(self, image: Image.Image) -> np.ndarray:
        small = image.convert("RGB").resize(
            (self.patch_size, self.patch_size), Image.BILINEAR)
        flat = normalize_pixels(np.asarray(small, dtype=np.uint8)).reshape(-1)
        return (flat.astype(np.float64) @ self._matrix)


def make_encoder(name: str, dim: int = 768) -> EncoderPort:
    if name == "mean_pixel":
        return MeanPixelEncoder()
    if name == "pixel_projection":
        return PixelProjectionEncoder(dim=dim)
    raise DataError(f"unknown encoder {name!r} (choose mean_pixel or pixel_projection)")


def extract_embeddings(manifest: DatasetManifest, encoder: EncoderPort,
                       cache_dir, split: str | None = "train",
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Embed the selected records in manifest order, with a disk cache.

    Cache entries are keyed by (encoder name, pixel hash); hits are returned
    bit-identically without invoking the encoder.
    """
    records = manifest.records if split is None else manifest.split_records(split)
    cache_dir = Path(cache_dir) / encoder.name
    index_path = cache_dir / "index.json"
    blob_path = cache_dir / "vectors.npy"
    if index_path.exists():
        index = read_json(index_path)
        if index["dim"] != encoder.dim:
            raise DataError(
                f"embedding cache dim {index['dim']} != encoder dim {encoder.dim}")
        blob = np.load(blob_path)
        entries = index["entries"]
    else:
        blob = np.empty((0, encoder.dim))
        entries = {}

    hashes = []
    for rec in records:
        h = rec.pixel_hash or pixel_hash(rec.path)
        hashes.append(h)

    new_rows = []
    for rec, h in zip(records, hashes):
        if h in entries:
            continue
        try:
            with Image.open(rec.path) as img:
                vec = np.asarray(encoder.embed(img), dtype=np.float64)
        except DataError:
            raise
        except Exception as exc:
            raise DataError(f"encoder failed on {rec.path}: {exc}") from exc
        if vec.shape != (encoder.dim,):
            raise DataError(
                f"encoder returned shape {vec.shape} for {rec.path}, expected ({encoder.dim},)")
        entries[h] = blob.shape[0] + len(new_rows)
        new_rows.append(vec)

    if new_rows:
        blob = np.concatenate([blob, np.stack(new_rows)], axis=0)
        import io

        buf = io.BytesIO()
        np.save(buf, blob)
        atomic_write_bytes(blob_path, buf.getvalue())
        atomic_write_json(index_path, {
            "schema_version": 1,
            "encoder": encoder.name,
            "dim": encoder.dim,
            "entries": entries,
        })

    rows = np.array([entries[h] for h in hashes], dtype=np.int64)
    labels = np.array([r.class_id for r in records], dtype=np.int64)
    return blob[rows].copy(), labels


def export_annotation_manifest(samples_manifest: dict, criteria: list,
                               out_path) -> int:
    """Turn a samples manifest into a labeling-task list for external review.

    One task per generated image: the binary plausible/implausible choice
    plus one checkbox per criterion. Aborts listing every missing image.
    Returns the number of tasks written.
    """
    images = samples_manifest.get("images", [])
    missing = [entry["path"] for entry in images if not Path(entry["path"]).exists()]
    if missing:
        raise DataError("missing sample images, export aborted: "
                        + ", ".join(missing))
    tasks = [{
        "image": entry["path"],
        "class_name": entry["class_name"],
        "plausible": None,
        "criteria": {c: None for c in criteria},
    } for entry in images]
    atomic_write_json(out_path, {
        "schema_version": ANNOTATION_SCHEMA_VERSION,
        "run_id": samples_manifest.get("run_id"),
        "criteria": list(criteria),
        "tasks": tasks,
    })
    return len(tasks)


def import_annotation_results(path) -> dict:
    """Parse completed annotations into per-class plausibility fractions."""
    doc = read_json(path)
    if doc.get("schema_version") != ANNOTATION_SCHEMA_VERSION:
        raise DataError(f"unsupported annotation schema: {doc.get('schema_version')}")
    totals: dict = {}
    plausible: dict = {}
    for task in doc["tasks"]:
        verdict = task.get("plausible")
        if verdict is None:
            continue
        name = task["class_name"]
        totals[name] = totals.get(name, 0) + 1
        plausible[name] = plausible.get(name, 0) + (1 if verdict else 0)
    return {name: plausible[name] / totals[name] for name in sorted(totals)}
