"""Sliding-window inference, count metrics and embedding export."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from crowd_mlp.data.manifest import ManifestRecord, load_image
from crowd_mlp.data.transforms import resize_policy
from crowd_mlp.engine.tensor import DimensionError, ParameterError, Tensor
from crowd_mlp.log import debug_detail
from crowd_mlp.model.crowdmlp import CrowdMLP, predict_with_embedding

WINDOW_CHUNK = 8


@dataclass(frozen=True)
class WindowCell:
    row: int
    col: int
    top: int
    left: int
    count: float
    owned_pixels: int


@dataclass
class WindowGrid:
    window: int
    cells: list[WindowCell]
    total: float
    embeddings: np.ndarray = field(repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return (max(c.row for c in self.cells) + 1, max(c.col for c in self.cells) + 1)

    def embedding(self) -> np.ndarray:
        """Window embeddings averaged with weights proportional to the pixels each owns."""
        weights = np.array([c.owned_pixels for c in self.cells], dtype=np.float64)
        return (weights[:, None] * self.embeddings).sum(axis=0) / weights.sum()


@dataclass
class MetricsReport:
    n: int
    mae: float
    mse: float
    rmse: float
    residuals: list[float]

    def to_dict(self) -> dict[str, object]:
        return {
            "N": self.n,
            "MAE": self.mae,
            "MSE": self.mse,
            "RMSE": self.rmse,
            "residuals": self.residuals,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def table(self) -> str:
        rows = [("N", str(self.n))] + [
            (label, f"{value:.6f}")
            for label, value in (("MAE", self.mae), ("MSE", self.mse), ("RMSE", self.rmse))
        ]
        width = max(len(label) for label, _ in rows)
        return "\n".join(f"{label.ljust(width)}  {value}" for label, value in rows)


def window_starts(extent: int, window: int) -> list[int]:
    """Non-overlapping starts, plus one window flush with the far edge when needed."""
    if window > extent:
        raise ParameterError(f"Window {window} is larger than the image extent {extent}")
    starts = list(range(0, extent - window + 1, window))
    if starts[-1] + window < extent:
        starts.append(extent - window)
    return starts


def ownership(starts: Sequence[int], window: int) -> list[tuple[int, int]]:
    """Half-open pixel span each window contributes; a flush window takes the shared strip."""
    spans = []
    for i, start in enumerate(starts):
        stop = start + window
        if i + 1 < len(starts):
            stop = min(stop, starts[i + 1])
        spans.append((start, stop))
    return spans


def sliding_window_count(image: np.ndarray, model: CrowdMLP, window: int) -> WindowGrid:
    """Eval-mode count per window, summed in row-major order.

    Pixels covered by two windows contribute only through the later, flush window;
    the earlier window sees that strip zeroed.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise DimensionError(f"sliding_window_count expects a 3×H×W image, got {image.shape}")
    if window != model.config.image_size:
        raise ParameterError(
            f"Window {window} must equal the model input size {model.config.image_size}"
        )
    height, width = image.shape[-2:]
    row_spans = ownership(window_starts(height, window), window)
    col_spans = ownership(window_starts(width, window), window)

    placements = []
    crops = []
    for r, (top, row_stop) in enumerate(row_spans):
        for c, (left, col_stop) in enumerate(col_spans):
            crop = image[:, top : top + window, left : left + window].copy()
            crop[:, row_stop - top :, :] = 0.0
            crop[:, :, col_stop - left :] = 0.0
            crops.append(crop)
            placements.append((r, c, top, left, (row_stop - top) * (col_stop - left)))

    counts: list[float] = []
    embeddings = []
    for begin in range(0, len(crops), WINDOW_CHUNK):
        batch = Tensor(np.stack(crops[begin : begin + WINDOW_CHUNK]))
        predicted, pooled = predict_with_embedding(model, batch, None, "eval")
        counts.extend(float(v) for v in predicted.data)
        embeddings.append(pooled.data)

    cells = [
        WindowCell(row=r, col=c, top=top, left=left, count=count, owned_pixels=owned)
        for (r, c, top, left, owned), count in zip(placements, counts)
    ]
    total = 0.0
    for cell in cells:
        total += cell.count
    debug_detail(f"{len(cells)} windows of {window} over {height}×{width}: total {total:.3f}")
    return WindowGrid(
        window=window, cells=cells, total=total, embeddings=np.concatenate(embeddings)
    )


def compute_metrics(pred: Sequence[float], gt: Sequence[float]) -> MetricsReport:
    """MAE = mean |C_i - C_i^gt|, MSE = mean (C_i - C_i^gt)², RMSE = sqrt(MSE)."""
    if len(pred) != len(gt):
        raise DimensionError(f"Got {len(pred)} predictions for {len(gt)} ground-truth counts")
    if not pred:
        raise ParameterError("Metrics need at least one image")
    residuals = [float(p) - float(g) for p, g in zip(pred, gt)]
    n = len(residuals)
    mae = math.fsum(abs(r) for r in residuals) / n
    mse = math.fsum(r * r for r in residuals) / n
    return MetricsReport(n=n, mae=mae, mse=mse, rmse=math.sqrt(mse), residuals=residuals)


def prepare_image(image: np.ndarray, resize: tuple[int, int] | None) -> np.ndarray:
    """Apply the (long side, short side) resize policy, or keep the native resolution."""
    if resize is None:
        return image
    return resize_policy(image, *resize)


@dataclass
class ImagePrediction:
    path: Path
    count: float
    predicted: float
    embedding: np.ndarray


def predict_records(
    records: Iterable[ManifestRecord],
    model: CrowdMLP,
    *,
    window: int,
    resize: tuple[int, int] | None = None,
) -> list[ImagePrediction]:
    results = []
    for record in records:
        image = prepare_image(load_image(record.path), resize)
        grid = sliding_window_count(image, model, window)
        results.append(
            ImagePrediction(
                path=record.path,
                count=record.count,
                predicted=grid.total,
                embedding=grid.embedding(),
            )
        )
    return results


def evaluate_records(
    records: Sequence[ManifestRecord],
    model: CrowdMLP,
    *,
    window: int,
    resize: tuple[int, int] | None = None,
) -> MetricsReport:
    results = predict_records(records, model, window=window, resize=resize)
    return compute_metrics([r.predicted for r in results], [r.count for r in results])


def export_embeddings(
    records: Sequence[ManifestRecord],
    model: CrowdMLP,
    out_path: str | Path,
    *,
    window: int,
    resize: tuple[int, int] | None = None,
) -> Path:
    """One CSV row per image: path, count_pred, then the pooled embedding components."""
    results = predict_records(records, model, window=window, resize=resize)
    target = Path(out_path)
    target.parent.mkdir(parents=True, exist_ok=True)
    dim = model.config.token_dim
    with open(target, "w", encoding="utf-8", newline="") as file:
        writer = csv.writer(file)
        writer.writerow(["image", "count_pred", *(f"e{i}" for i in range(dim))])
        for result in results:
            writer.writerow(
                [
                    str(result.path),
                    repr(result.predicted),
                    *(repr(float(v)) for v in result.embedding),
                ]
            )
    return target
