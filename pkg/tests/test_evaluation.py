import csv
import json
from pathlib import Path

import numpy as np
import pytest

from crowd_mlp.data.manifest import ManifestRecord, load_image, save_image
from crowd_mlp.engine.rng import RngState
from crowd_mlp.engine.tensor import DimensionError, ParameterError, Tensor
from crowd_mlp.evaluation import (
    compute_metrics,
    evaluate_records,
    export_embeddings,
    ownership,
    sliding_window_count,
    window_starts,
)
from crowd_mlp.model.crowdmlp import CrowdMLP, build_model, predict_count
from crowd_mlp.settings import make_train_config


def _tiny_model() -> CrowdMLP:
    return build_model(make_train_config("tiny").run_model_config(), seed=2)


def test_metrics_example() -> None:
    report = compute_metrics([10.0, 20.0], [12.0, 18.0])

    assert (report.n, report.mae, report.mse, report.rmse) == (2, 2.0, 4.0, 2.0)
    assert report.residuals == [-2.0, 2.0]
    assert json.loads(report.to_json())["MAE"] == 2.0
    assert "RMSE" in report.table()


def test_metrics_reject_bad_input() -> None:
    with pytest.raises(DimensionError):
        compute_metrics([1.0], [1.0, 2.0])
    with pytest.raises(ParameterError):
        compute_metrics([], [])


def test_window_starts_add_a_flush_final_window() -> None:
    assert window_starts(1000, 256) == [0, 256, 512, 744]
    assert window_starts(512, 256) == [0, 256]
    assert window_starts(256, 256) == [0]
    with pytest.raises(ParameterError):
        window_starts(200, 256)


def test_ownership_gives_the_overlap_to_the_flush_window() -> None:
    spans = ownership([0, 256, 512, 744], 256)

    assert spans == [(0, 256), (256, 512), (512, 744), (744, 1000)]


def test_single_window_equals_a_full_pass() -> None:
    model = _tiny_model()
    image = RngState(3).random((3, 128, 128))

    grid = sliding_window_count(image, model, 128)

    full = predict_count(model, Tensor(image), None, "eval").item()
    assert len(grid.cells) == 1
    assert grid.total == pytest.approx(full, rel=1e-10, abs=1e-10)


def test_window_counts_sum_to_the_total() -> None:
    model = _tiny_model()
    image = RngState(4).random((3, 200, 300))

    grid = sliding_window_count(image, model, 128)

    assert grid.shape == (2, 3)
    assert [(c.top, c.left) for c in grid.cells[:3]] == [(0, 0), (0, 128), (0, 172)]
    assert grid.total == sum(c.count for c in grid.cells)
    assert sum(c.owned_pixels for c in grid.cells) == 200 * 300
    assert grid.embedding().shape == (model.config.token_dim,)


def test_window_must_match_the_model_input() -> None:
    model = _tiny_model()

    with pytest.raises(ParameterError):
        sliding_window_count(np.zeros((3, 256, 256)), model, 256)
    with pytest.raises(ParameterError):
        sliding_window_count(np.zeros((3, 100, 200)), model, 128)


def _write_manifest(tmp_path: Path, counts: list[int]) -> list[ManifestRecord]:
    records = []
    for i, count in enumerate(counts):
        path = save_image(tmp_path / f"img_{i}.png", RngState(i).random((3, 128, 160)))
        records.append(ManifestRecord(path=path, count=float(count)))
    return records


def test_evaluate_records_reports_every_image(tmp_path: Path) -> None:
    records = _write_manifest(tmp_path, [3, 7])

    report = evaluate_records(records, _tiny_model(), window=128)

    assert report.n == 2
    assert report.mae >= 0.0
    assert report.rmse == pytest.approx(np.sqrt(report.mse))


def test_export_embeddings_writes_one_row_per_image(tmp_path: Path) -> None:
    model = _tiny_model()
    records = _write_manifest(tmp_path, [1, 2, 5])

    out = export_embeddings(records, model, tmp_path / "out" / "emb.csv", window=128)

    with open(out, newline="", encoding="utf-8") as file:
        rows = list(csv.reader(file))
    dim = model.config.token_dim
    assert rows[0] == ["image", "count_pred", *(f"e{i}" for i in range(dim))]
    assert len(rows) == 4
    assert all(len(row) == dim + 2 for row in rows[1:])
    assert [float(v) for v in rows[1][1:]]


def test_metrics_match_a_loop_oracle() -> None:
    rng = RngState(8)
    pred, gt = rng.uniform(0.0, 500.0, 100), rng.uniform(0.0, 500.0, 100)

    report = compute_metrics(list(pred), list(gt))

    abs_total, sq_total = 0.0, 0.0
    for p, g in zip(pred, gt):
        abs_total += abs(p - g)
        sq_total += (p - g) ** 2
    assert report.mae == pytest.approx(abs_total / 100, rel=1e-12)
    assert report.mse == pytest.approx(sq_total / 100, rel=1e-12)
    assert report.mae <= report.rmse


def test_resized_frame_tiles_into_twelve_windows() -> None:
    rows, cols = window_starts(768, 256), window_starts(1024, 256)

    assert len(rows) * len(cols) == 12


def test_exported_counts_match_the_window_totals(tmp_path: Path) -> None:
    model = _tiny_model()
    image = RngState(12).random((3, 128, 160))
    first = save_image(tmp_path / "a.png", image)
    second = save_image(tmp_path / "b.png", image)
    records = [ManifestRecord(path=first, count=1.0), ManifestRecord(path=second, count=1.0)]

    out = export_embeddings(records, model, tmp_path / "emb.csv", window=128)

    with open(out, newline="", encoding="utf-8") as file:
        rows = list(csv.reader(file))[1:]
    assert rows[0][1:] == rows[1][1:]
    expected = sliding_window_count(load_image(first), model, 128).total
    assert float(rows[0][1]) == expected
