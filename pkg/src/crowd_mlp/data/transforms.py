"""Cropping, flipping, lighting jitter and resizing for scene samples."""

from __future__ import annotations

import numpy as np
from PIL import Image

from crowd_mlp.data.synth import SceneSample
from crowd_mlp.engine.rng import RngState
from crowd_mlp.engine.tensor import ParameterError

FLIP_PROBABILITY = 0.5
LIGHTING_PROBABILITY = 0.5
GAIN_RANGE = (0.8, 1.2)
OFFSET_RANGE = (-0.1, 0.1)

LONG_SIDE = 1024
SHORT_SIDE = 768


class UnsupportedOperationError(RuntimeError):
    """Raised when a transform needs object centers that the sample does not carry."""


def crop(sample: SceneSample, top: int, left: int, size: int) -> SceneSample:
    """Cut a size×size window; points in [left, left+size) × [top, top+size) are kept."""
    if sample.points is None:
        raise UnsupportedOperationError(
            "Cropping needs object centers to recount; manifest samples carry only a total"
        )
    if size < 1 or top < 0 or left < 0 or top + size > sample.height or left + size > sample.width:
        raise ParameterError(
            f"Crop {size}×{size} at ({top}, {left}) does not fit a "
            f"{sample.height}×{sample.width} image"
        )
    xs, ys = sample.points[:, 0], sample.points[:, 1]
    inside = (xs >= left) & (xs < left + size) & (ys >= top) & (ys < top + size)
    points = sample.points[inside] - np.array([left, top], dtype=np.float64)
    image = sample.image[:, top : top + size, left : left + size].copy()
    return SceneSample(image=image, count=len(points), points=points)


def random_crop(sample: SceneSample, size: int, rng: RngState) -> SceneSample:
    if size > min(sample.height, sample.width):
        raise ParameterError(
            f"Crop size {size} exceeds the {sample.height}×{sample.width} image"
        )
    top = int(rng.integers(0, sample.height - size))
    left = int(rng.integers(0, sample.width - size))
    return crop(sample, top, left, size)


def hflip(sample: SceneSample) -> SceneSample:
    """Mirror the columns; x maps to width - x, clamped below width to stay in [0, width)."""
    image = sample.image[:, :, ::-1].copy()
    points = None
    if sample.points is not None:
        points = sample.points.copy()
        edge = np.nextafter(float(sample.width), 0.0)
        points[:, 0] = np.minimum(sample.width - points[:, 0], edge)
    return SceneSample(image=image, count=sample.count, points=points)


def adjust_lighting(image: np.ndarray, gain: float, offset: float) -> np.ndarray:
    return np.clip(image * gain + offset, 0.0, 1.0)


def augment(sample: SceneSample, rng: RngState) -> SceneSample:
    """Horizontal flip and lighting jitter, each with probability 0.5; the count never changes."""
    if rng.derive("flip").random(()) < FLIP_PROBABILITY:
        sample = hflip(sample)
    light = rng.derive("lighting")
    if light.random(()) < LIGHTING_PROBABILITY:
        gain = float(light.uniform(*GAIN_RANGE))
        offset = float(light.uniform(*OFFSET_RANGE))
        sample = SceneSample(
            image=adjust_lighting(sample.image, gain, offset),
            count=sample.count,
            points=sample.points,
        )
    return sample


def resize_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a C×H×W array, channel by channel."""
    if height < 1 or width < 1:
        raise ParameterError(f"Resize target must be positive, got {height}×{width}")
    if image.shape[-2:] == (height, width):
        return np.array(image, dtype=np.float64)
    channels = [
        np.asarray(
            Image.fromarray(np.asarray(plane, dtype=np.float32)).resize(
                (width, height), resample=Image.Resampling.BILINEAR
            ),
            dtype=np.float64,
        )
        for plane in image
    ]
    return np.stack(channels)


def resize_policy(
    image: np.ndarray, long_side: int = LONG_SIDE, short_side: int = SHORT_SIDE
) -> np.ndarray:
    """Map the longer side to ``long_side`` and the other to ``short_side``; aspect may change."""
    height, width = image.shape[-2:]
    if width >= height:
        return resize_image(image, short_side, long_side)
    return resize_image(image, long_side, short_side)


def resize_sample(sample: SceneSample, height: int, width: int) -> SceneSample:
    points = None
    if sample.points is not None:
        factors = np.array([width / sample.width, height / sample.height])
        points = sample.points * factors
    return SceneSample(
        image=resize_image(sample.image, height, width), count=sample.count, points=points
    )


def fit_to_model(sample: SceneSample, size: int) -> SceneSample:
    """Resize a whole sample to the model's size×size input, keeping its count label."""
    return resize_sample(sample, size, size)
