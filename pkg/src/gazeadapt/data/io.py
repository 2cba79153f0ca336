"""Preprocessing, manifests, in-memory datasets and batching.

Manifest CSV columns are ``path,gx,gy,gz,domain,split``. ``path`` is
relative to the CSV's directory; gaze fields are left blank for unlabelled
target records. Images are 8-bit grayscale PNGs.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from ..errors import IngestionError
from .render import IMAGE_H, IMAGE_W

log = logging.getLogger(__name__)

DOMAINS = ("source", "target")
SPLITS = ("train", "val", "test")
MANIFEST_COLUMNS = ("path", "gx", "gy", "gz", "domain", "split")
# ITU-R BT.601 luma
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass
class GazeSample:
    image: np.ndarray
    gaze: np.ndarray
    domain: str

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.gaze = np.asarray(self.gaze, dtype=np.float64)
        if self.image.shape != (IMAGE_H, IMAGE_W):
            raise IngestionError(f"image must be {IMAGE_H}x{IMAGE_W}, got {self.image.shape}")
        if self.image.min() < -1 or self.image.max() > 1:
            raise IngestionError("image values must lie in [-1, 1]")
        if abs(np.linalg.norm(self.gaze) - 1.0) > 1e-6:
            raise IngestionError("gaze must have unit norm")
        if self.domain not in DOMAINS:
            raise IngestionError(f"unknown domain {self.domain!r}")


def preprocess(raw) -> np.ndarray:
    """Raw 8-bit image (H, W) or (H, W, 3) -> centre-cropped 35x55 float32 in [-1, 1].

    Odd margins put the extra pixel on the bottom/right, i.e. the crop window
    is shifted towards the top-left.
    """
    a = np.asarray(raw)
    if a.ndim == 3:
        if a.shape[2] == 4:
            a = a[..., :3]
        a = a.astype(np.float64) @ np.asarray(LUMA_WEIGHTS)
    elif a.ndim != 2:
        raise IngestionError(f"expected a 2D grayscale or HxWx3 colour image, got shape {a.shape}")
    h, w = a.shape
    if h < IMAGE_H or w < IMAGE_W:
        raise IngestionError(f"image {h}x{w} is smaller than {IMAGE_H}x{IMAGE_W}")
    top, left = (h - IMAGE_H) // 2, (w - IMAGE_W) // 2
    crop = a[top:top + IMAGE_H, left:left + IMAGE_W].astype(np.float64)
    return (crop / 127.5 - 1.0).astype(np.float32)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Inverse of the [0, 255] -> [-1, 1] map, rounded to 8 bits."""
    return np.clip(np.rint((np.asarray(image, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def save_png(image: np.ndarray, path) -> None:
    Image.fromarray(to_uint8(image), mode="L").save(path, optimize=False)


def load_raw(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB", "RGBA"):
            im = im.convert("RGB")
        return np.asarray(im)


# -- manifests ---------------------------------------------------------------

@dataclass
class ManifestRecord:
    image: object  # path (str / Path) or an in-memory array
    gaze: tuple[float, float, float] | None
    domain: str

    @property
    def labeled(self) -> bool:
        return self.gaze is not None


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    split: str = "train"
    root: Path | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise IngestionError(f"unknown split {self.split!r}")
        for r in self.records:
            if r.domain not in DOMAINS:
                raise IngestionError(f"unknown domain {r.domain!r}")
            if r.domain == "source" and r.gaze is None:
                raise IngestionError("source records must carry gaze labels")

    def __len__(self):
        return len(self.records)

    @property
    def labeled(self) -> bool:
        return bool(self.records) and all(r.labeled for r in self.records)

    def resolve(self, record: ManifestRecord) -> Path:
        p = Path(record.image)
        return p if p.is_absolute() or self.root is None else self.root / p


def write_manifest(path, rows: Sequence[tuple[ManifestRecord, str]]) -> None:
    """Write ``(record, split)`` rows. Record images must be relative paths."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for rec, split in rows:
            g = ("", "", "") if rec.gaze is None else tuple(repr(float(v)) for v in rec.gaze)
            w.writerow([Path(rec.image).as_posix(), *g, rec.domain, split])


def read_manifest(path, split: str | None = None, domain: str | None = None) -> DatasetManifest:
    """Load the rows of a manifest CSV matching ``split`` and ``domain``.

    With ``split=None`` all rows must share one split.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"manifest not found: {path}")
    records, splits = [], set()
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise IngestionError(f"{path}: header must be {','.join(MANIFEST_COLUMNS)}")
        for row in reader:
            if split is not None and row["split"] != split:
                continue
            if domain is not None and row["domain"] != domain:
                continue
            splits.add(row["split"])
            gz = (row["gx"], row["gy"], row["gz"])
            if all(v == "" for v in gz):
                gaze = None
            else:
                try:
                    gaze = tuple(float(v) for v in gz)
                except ValueError:
                    raise IngestionError(f"{path}: malformed gaze in row {row}") from None
            records.append(ManifestRecord(row["path"], gaze, row["domain"]))
    if split is None:
        if len(splits) > 1:
            raise IngestionError(f"{path} mixes splits {sorted(splits)}; pass split=")
        split = splits.pop() if splits else "train"
    return DatasetManifest(records, split, path.parent)


# -- in-memory datasets ------------------------------------------------------

@dataclass
class GazeDataset:
    """Stacked images (N, 35, 55) float32 and gazes (N, 3) or None."""

    images: np.ndarray
    gazes: np.ndarray | None
    domain: str = "source"
    names: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    @property
    def labeled(self) -> bool:
        return self.gazes is not None

    def subset(self, idx) -> "GazeDataset":
        idx = np.asarray(idx)
        names = [self.names[i] for i in idx] if self.names else []
        return GazeDataset(self.images[idx], None if self.gazes is None else self.gazes[idx],
                           self.domain, names)

    def unlabeled(self) -> "GazeDataset":
        return GazeDataset(self.images, None, self.domain, list(self.names))

    def batches(self, batch_size: int, epoch_seed: int) -> Iterator["Batch"]:
        return iterate_batches(self, batch_size, epoch_seed)


@dataclass
class Batch:
    images: np.ndarray
    gazes: np.ndarray | None
    indices: np.ndarray


def load_dataset(manifest: DatasetManifest) -> GazeDataset:
    if len(manifest) == 0:
        raise IngestionError("manifest is empty")
    domains = {r.domain for r in manifest.records}
    if len(domains) > 1:
        raise IngestionError(f"manifest mixes domains {sorted(domains)}")
    images, names = [], []
    for rec in manifest.records:
        if isinstance(rec.image, np.ndarray):
            arr = rec.image
            images.append(arr.astype(np.float32) if arr.dtype.kind == "f" else preprocess(arr))
            names.append("")
        else:
            p = manifest.resolve(rec)
            if not p.is_file():
                raise IngestionError(f"image not found: {p}")
            images.append(preprocess(load_raw(p)))
            names.append(str(rec.image))
    labeled = all(r.labeled for r in manifest.records)
    gazes = None
    if labeled:
        gazes = np.asarray([r.gaze for r in manifest.records], dtype=np.float64)
        gazes = (gazes / np.linalg.norm(gazes, axis=1, keepdims=True)).astype(np.float32)
    return GazeDataset(np.stack(images), gazes, domains.pop(), names)


def iterate_batches(data, batch_size: int, epoch_seed: int) -> Iterator[Batch]:
    """One epoch of shuffled, fixed-size batches; a trailing partial batch is dropped."""
    if batch_size < 1:
        raise IngestionError(f"batch size must be >= 1, got {batch_size}")
    if isinstance(data, DatasetManifest):
        data = load_dataset(data)
    n = len(data)
    if n == 0:
        raise IngestionError("cannot batch an empty dataset")
    order = np.random.default_rng(epoch_seed).permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        yield Batch(data.images[idx], None if data.gazes is None else data.gazes[idx], idx)


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def endless_batches(data: GazeDataset, batch_size: int, seed: int) -> Iterator[Batch]:
    """Concatenated epochs with per-epoch seeds derived from ``seed``."""
    if len(data) < batch_size:
        raise IngestionError(f"dataset of {len(data)} samples cannot fill a batch of {batch_size}")
    epoch = 0
    while True:
        yield from iterate_batches(data, batch_size, epoch_seed(seed, epoch))
        epoch += 1


# -- external metadata -------------------------------------------------------

@dataclass
class ConversionReport:
    converted: int = 0
    errors: list[tuple[str, str]] = field(default_factory=list)

    def to_dict(self):
        return {"converted": self.converted,
                "errors": [{"record": r, "reason": why} for r, why in self.errors]}


def _parse_look_vec(value) -> tuple[float, float, float]:
    if isinstance(value, str):
        value = value.strip().strip("()[]")
        parts = [p for p in value.replace(",", " ").split() if p]
    else:
        parts = list(value)
    vec = [float(p) for p in parts]
    if len(vec) == 4:
        vec = vec[:3]  # homogeneous coordinate
    if len(vec) != 3 or not all(math.isfinite(v) for v in vec):
        raise ValueError(f"expected 3 finite components, got {parts}")
    n = math.sqrt(sum(v * v for v in vec))
    if n == 0:
        raise ValueError("zero-length look vector")
    return tuple(v / n for v in vec)


def _read_metadata(path: Path) -> list[dict]:
    text = path.read_text().strip()
    if not text:
        return []
    if text.startswith("["):
        return json.loads(text)
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def convert_external_metadata(metadata_file, image_dir, out_csv=None, domain: str = "source",
                              split: str = "train", flip_y: bool = False):
    """Build a manifest from UnityEyes-style per-image metadata.

    ``metadata_file`` holds a JSON array (or JSON lines) of objects with an
    ``image`` name and a look vector, either as ``look_vec`` or nested under
    ``eye_details.look_vec``; vectors may be given as lists or as strings
    like ``"(0.1, -0.2, 0.97, 0.0)"``. Broken records are collected in the
    returned report and skipped.

    Returns ``(manifest, report)``.
    """
    metadata_file, image_dir = Path(metadata_file), Path(image_dir)
    report = ConversionReport()
    try:
        entries = _read_metadata(metadata_file)
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestionError(f"cannot read metadata {metadata_file}: {exc}") from None
    if not entries:
        warnings.warn(f"{metadata_file}: no metadata records", stacklevel=2)

    root = Path(out_csv).parent if out_csv is not None else image_dir
    records = []
    for i, entry in enumerate(entries):
        name = str(entry.get("image", f"#{i}")) if isinstance(entry, dict) else f"#{i}"
        try:
            if not isinstance(entry, dict) or "image" not in entry:
                raise ValueError("record has no image field")
            img = image_dir / entry["image"]
            if not img.is_file():
                raise ValueError(f"missing image {img}")
            raw = entry.get("look_vec")
            if raw is None:
                raw = (entry.get("eye_details") or {}).get("look_vec")
            if raw is None:
                raise ValueError("record has no look vector")
            g = _parse_look_vec(raw)
            if flip_y:
                g = (g[0], -g[1], g[2])
        except (ValueError, TypeError) as exc:
            report.errors.append((name, str(exc)))
            continue
        rel = Path(_relpath(img, root))
        records.append(ManifestRecord(str(rel.as_posix()), g, domain))
        report.converted += 1
    if report.errors:
        log.warning("%d metadata record(s) rejected", len(report.errors))
    manifest = DatasetManifest(records, split, root)
    if out_csv is not None:
        write_manifest(out_csv, [(r, split) for r in records])
    return manifest, report


def _relpath(path: Path, start: Path) -> str:
    return os.path.relpath(path.resolve(), start.resolve())
