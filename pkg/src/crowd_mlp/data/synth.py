"""Synthetic crowd scenes with exact counts and retained object centers."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from crowd_mlp.data.manifest import MANIFEST_HEADER, save_image
from crowd_mlp.engine.rng import RngState
from crowd_mlp.log import logger

# Per-channel tint of the textured background.
_BACKGROUND_TINT = np.array([0.30, 0.27, 0.24])
_TEXTURE_CELL = 16


@dataclass
class SceneSample:
    image: np.ndarray
    count: float
    points: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.count = float(self.count)
        if self.count < 0:
            raise ValueError(f"Scene count must be nonnegative, got {self.count}")
        if self.points is not None:
            self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
            if len(self.points) != self.count:
                raise ValueError(
                    f"Scene count {self.count} does not match {len(self.points)} points"
                )

    @property
    def height(self) -> int:
        return self.image.shape[-2]

    @property
    def width(self) -> int:
        return self.image.shape[-1]


class SynthConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    height: int = Field(default=128, ge=8)
    width: int = Field(default=128, ge=8)
    n_min: int = Field(default=20, ge=0)
    n_max: int = Field(default=80, ge=0)
    radius_min: float = Field(default=1.5, gt=0.0)
    radius_max: float = Field(default=3.0, gt=0.0)
    perspective: float = Field(default=0.5, ge=0.0, lt=1.0)
    texture: float = Field(default=0.1, ge=0.0, le=1.0)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _ranges(self) -> SynthConfig:
        if self.n_min > self.n_max:
            raise ValueError(f"n_min ({self.n_min}) must not exceed n_max ({self.n_max})")
        if self.radius_min > self.radius_max:
            raise ValueError(
                f"radius_min ({self.radius_min}) must not exceed radius_max ({self.radius_max})"
            )
        return self


def generate_scene(cfg: SynthConfig, rng: RngState) -> SceneSample:
    """Render N ~ U[n_min, n_max] soft blobs over a textured background.

    Blob radius shrinks linearly towards the top of the frame to mimic perspective.
    Points are (x, y) pixel coordinates of the blob centers.
    """
    height, width = cfg.height, cfg.width
    count = int(rng.integers(cfg.n_min, cfg.n_max))
    image = _background(cfg, rng.derive("background"))

    blob_rng = rng.derive("blobs")
    xs = blob_rng.uniform(0.0, width, count)
    ys = blob_rng.uniform(0.0, height, count)
    base_radius = blob_rng.uniform(cfg.radius_min, cfg.radius_max, count)
    colors = blob_rng.uniform(0.55, 1.0, (count, 3))

    depth = (1.0 - cfg.perspective) + cfg.perspective * (ys / height)
    radii = base_radius * depth
    rows = np.arange(height)[:, None] + 0.5
    cols = np.arange(width)[None, :] + 0.5
    for x, y, r, color in zip(xs, ys, radii, colors):
        reach = int(np.ceil(3.0 * r))
        top, bottom = max(0, int(y) - reach), min(height, int(y) + reach + 1)
        left, right = max(0, int(x) - reach), min(width, int(x) + reach + 1)
        dy = rows[top:bottom] - y
        dx = cols[:, left:right] - x
        blob = np.exp(-(dx * dx + dy * dy) / (2.0 * r * r))
        image[:, top:bottom, left:right] += color[:, None, None] * blob

    points = np.stack([xs, ys], axis=1) if count else np.zeros((0, 2))
    return SceneSample(image=np.clip(image, 0.0, 1.0), count=count, points=points)


def generate_scenes(cfg: SynthConfig, n: int, *, offset: int = 0) -> list[SceneSample]:
    """Scenes ``offset .. offset+n-1``; each depends only on (cfg.seed, index)."""
    root = RngState(cfg.seed).derive("scene")
    return [generate_scene(cfg, root.derive(offset + i)) for i in range(n)]


def export_synthetic(out_dir: str | Path, cfg: SynthConfig, n: int) -> Path:
    """Write ``scene_XXXX.png`` files plus ``manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for index, scene in enumerate(generate_scenes(cfg, n)):
        name = f"scene_{index:04d}.png"
        save_image(out / name, scene.image)
        lines.append(f"{name},{int(scene.count)}")
    manifest = out / "manifest.csv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("Wrote %d synthetic scenes to %s", n, out)
    return manifest


def _background(cfg: SynthConfig, rng: RngState) -> np.ndarray:
    height, width = cfg.height, cfg.width
    cells_y = height // _TEXTURE_CELL + 2
    cells_x = width // _TEXTURE_CELL + 2
    coarse = rng.uniform(-1.0, 1.0, (cells_y, cells_x))
    # Nearest-cell texture, then a 3-tap box blur per axis to soften cell edges.
    texture = np.kron(coarse, np.ones((_TEXTURE_CELL, _TEXTURE_CELL)))[:height, :width]
    texture = (np.roll(texture, 1, axis=0) + texture + np.roll(texture, -1, axis=0)) / 3.0
    texture = (np.roll(texture, 1, axis=1) + texture + np.roll(texture, -1, axis=1)) / 3.0
    shade = 1.0 + cfg.texture * texture
    return _BACKGROUND_TINT[:, None, None] * shade[None, :, :]
