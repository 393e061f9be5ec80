"""Manifest ingestion and PNG image I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

MANIFEST_HEADER = "image,count"


class ManifestError(ValueError):
    """Raised when a manifest is missing or has a malformed row."""

    def __init__(self, message: str, *, path: Path, line: int | None = None) -> None:
        location = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{location}: {message}")
        self.path = path
        self.line = line


class ImageLoadError(OSError):
    """Raised when an image file cannot be read or decoded."""


@dataclass(frozen=True)
class ManifestRecord:
    path: Path
    count: float


def load_manifest(path: str | Path) -> list[ManifestRecord]:
    """Parse ``image,count`` rows; image paths resolve against the manifest's directory."""
    manifest = Path(path)
    try:
        text = manifest.read_text(encoding="utf-8-sig")
    except FileNotFoundError as exc:
        raise ManifestError("manifest file not found", path=manifest) from exc
    except OSError as exc:
        raise ManifestError(f"cannot read manifest: {exc}", path=manifest) from exc

    rows = list(csv.reader(text.splitlines()))
    if not rows:
        return []
    header = [cell.strip().lower() for cell in rows[0]]
    if header != ["image", "count"]:
        raise ManifestError(f"expected header {MANIFEST_HEADER!r}", path=manifest, line=1)

    records = []
    for line_no, row in enumerate(rows[1:], start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 2:
            raise ManifestError(
                f"expected 2 fields (image,count), got {len(row)}", path=manifest, line=line_no
            )
        image, raw_count = row[0].strip(), row[1].strip()
        if not image:
            raise ManifestError("empty image path", path=manifest, line=line_no)
        try:
            count = float(raw_count)
        except ValueError as exc:
            raise ManifestError(
                f"count {raw_count!r} is not a number", path=manifest, line=line_no
            ) from exc
        if not math.isfinite(count) or count < 0:
            raise ManifestError(
                f"count must be a nonnegative number, got {raw_count!r}",
                path=manifest,
                line=line_no,
            )
        records.append(ManifestRecord(path=manifest.parent / image, count=count))
    return records


def load_image(path: str | Path) -> np.ndarray:
    """Read an image as a 3×H×W float array in [0, 1]."""
    try:
        with Image.open(path) as handle:
            rgb = np.asarray(handle.convert("RGB"), dtype=np.float64)
    except (FileNotFoundError, UnidentifiedImageError) as exc:
        raise ImageLoadError(f"Cannot load image {path}: {exc}") from exc
    except OSError as exc:
        raise ImageLoadError(f"Cannot decode image {path}: {exc}") from exc
    return np.ascontiguousarray(rgb.transpose(2, 0, 1) / 255.0)


def save_image(path: str | Path, image: np.ndarray) -> Path:
    """Write a 3×H×W array in [0, 1] as an 8-bit RGB PNG."""
    array = np.asarray(image, dtype=np.float64)
    if array.ndim != 3 or array.shape[0] != 3:
        raise ValueError(f"save_image expects a 3×H×W array, got {array.shape}")
    pixels = np.rint(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(pixels)).save(target, format="PNG")
    return target
