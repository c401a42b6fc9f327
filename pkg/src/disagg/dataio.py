"""On-disk dataset layout and raw float32 map files.

Layout of a dataset directory::

    manifest.json          [{"id", "chip", "mask", "labels", "oracle"?}, ...]
    <id>_chip.png          8-bit RGB
    <id>_mask.png          16-bit grayscale region indices, 0 = background
    <id>_labels.csv        header ``region_id,value``, region_id 1-based
    <id>_oracle.f32        little-endian float32, row-major
    <id>_oracle.json       {"height": H, "width": W}

Paths inside the manifest are relative to the manifest's directory.
"""

import csv
import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import DisaggError, LoadError, ShapeError
from .scene import Sample

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_map(path, values):
    """Write a 2-D map as raw little-endian float32 plus a JSON sidecar."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ShapeError(f"map must be 2-D, got shape {values.shape}")
    path = Path(path)
    path.write_bytes(values.astype("<f4").tobytes(order="C"))
    h, w = values.shape
    sidecar_path(path).write_text(json.dumps({"height": int(h), "width": int(w)}) + "\n")


def read_map(path):
    """Read a float32 map written by :func:`write_map`, returned as float64."""
    path = Path(path)
    side = sidecar_path(path)
    if not side.exists():
        raise LoadError(f"missing sidecar {side} for map {path}")
    meta = json.loads(side.read_text())
    h, w = int(meta["height"]), int(meta["width"])
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != h * w:
        raise LoadError(f"map {path} holds {raw.size} values, sidecar says {h}x{w}")
    return raw.reshape(h, w).astype(np.float64)


def write_chip_png(path, chip):
    chip = np.asarray(chip)
    if chip.ndim == 3 and chip.shape[2] == 1:
        chip = chip[:, :, 0]
    data = np.round(np.clip(chip, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def read_chip_png(path):
    with Image.open(path) as img:
        if img.mode not in ("RGB", "L"):
            img = img.convert("RGB")
        data = np.asarray(img, dtype=np.float64) / 255.0
    if data.ndim == 2:
        data = data[:, :, None]
    return data


def write_mask_png(path, mask):
    mask = np.asarray(mask)
    if mask.max(initial=0) > np.iinfo(np.uint16).max:
        raise ShapeError("mask has more regions than a 16-bit PNG can hold")
    Image.fromarray(mask.astype(np.uint16)).save(path, format="PNG")


def read_mask_png(path):
    with Image.open(path) as img:
        return np.asarray(img).astype(np.int64)


def write_labels_csv(path, labels):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["region_id", "value"])
        for k, value in enumerate(labels, start=1):
            writer.writerow([k, repr(float(value))])


def read_labels_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["region_id", "value"]:
            raise LoadError(f"{path}: header must be 'region_id,value'")
        rows = [(int(r["region_id"]), float(r["value"])) for r in reader]
    ids = [r[0] for r in rows]
    if ids != list(range(1, len(rows) + 1)):
        raise LoadError(f"{path}: region ids must run 1..n in order")
    return np.array([r[1] for r in rows], dtype=np.float64)


def write_dataset(samples, out_dir):
    """Write samples plus ``manifest.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for s in samples:
        entry = {
            "id": s.id,
            "chip": f"{s.id}_chip.png",
            "mask": f"{s.id}_mask.png",
            "labels": f"{s.id}_labels.csv",
        }
        write_chip_png(out_dir / entry["chip"], s.chip)
        write_mask_png(out_dir / entry["mask"], s.mask)
        write_labels_csv(out_dir / entry["labels"], s.labels)
        if s.oracle is not None:
            entry["oracle"] = f"{s.id}_oracle.f32"
            write_map(out_dir / entry["oracle"], s.oracle)
        if s.gsd_meters != 1.0:
            entry["gsd_meters"] = s.gsd_meters
        manifest.append(entry)
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return out_dir / MANIFEST


def _load_entry(root, entry):
    sid = entry.get("id", "<missing id>")
    try:
        for key in ("id", "chip", "mask", "labels"):
            if key not in entry:
                raise LoadError(f"manifest entry lacks '{key}'")
        for key in ("chip", "mask", "labels", "oracle"):
            if key in entry and not (root / entry[key]).exists():
                raise LoadError(f"missing file {entry[key]}")
        chip = read_chip_png(root / entry["chip"])
        mask = read_mask_png(root / entry["mask"])
        if mask.shape != chip.shape[:2]:
            raise LoadError(f"shape mismatch: chip {chip.shape[:2]} vs mask {mask.shape}")
        labels = read_labels_csv(root / entry["labels"])
        n = int(mask.max(initial=0))
        if labels.shape[0] != n:
            raise LoadError(f"label count mismatch: {labels.shape[0]} labels, mask has {n} regions")
        oracle = read_map(root / entry["oracle"]) if "oracle" in entry else None
        sample = Sample(
            id=sid, chip=chip, mask=mask, labels=labels, oracle=oracle,
            gsd_meters=float(entry.get("gsd_meters", 1.0)),
        )
        return sample.validate()
    except (DisaggError, OSError, ValueError) as exc:
        message = str(exc)
        if isinstance(exc, LoadError) and message.startswith(f"{sid}:"):
            raise
        raise LoadError(f"{sid}: {message}") from exc


def load_dataset(manifest_path, strict=True):
    """Load and validate every sample listed in a manifest, in manifest order.

    With ``strict=False`` invalid samples are logged and skipped instead of
    raising :class:`LoadError`.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST
    if not manifest_path.exists():
        raise LoadError(f"manifest {manifest_path} not found")
    try:
        entries = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise LoadError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc
    if not isinstance(entries, list):
        raise LoadError("manifest must be a JSON array")
    root = manifest_path.parent
    samples = []
    for entry in entries:
        try:
            samples.append(_load_entry(root, entry))
        except LoadError as exc:
            if strict:
                raise
            logger.warning("rejected sample %s", exc)
    return samples
