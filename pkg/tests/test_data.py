from pathlib import Path

import numpy as np
import pytest

from crowd_mlp.data.manifest import (
    ImageLoadError,
    ManifestError,
    load_image,
    load_manifest,
    save_image,
)
from crowd_mlp.data.synth import (
    SceneSample,
    SynthConfig,
    export_synthetic,
    generate_scene,
    generate_scenes,
)
from crowd_mlp.data.transforms import (
    UnsupportedOperationError,
    augment,
    crop,
    fit_to_model,
    hflip,
    random_crop,
    resize_policy,
)
from crowd_mlp.engine.rng import RngState
from crowd_mlp.engine.tensor import ParameterError


def _scene(seed: int = 0, **overrides: object) -> SceneSample:
    cfg = SynthConfig(**{"height": 128, "width": 128, "n_min": 10, "n_max": 40, **overrides})
    return generate_scene(cfg, RngState(seed))


def test_generated_scene_count_matches_its_points() -> None:
    cfg = SynthConfig(height=96, width=128, n_min=5, n_max=30)
    for scene in generate_scenes(cfg, 10):
        assert scene.count == len(scene.points)
        assert 5 <= scene.count <= 30
        assert scene.image.shape == (3, 96, 128)
        assert scene.image.min() >= 0.0 and scene.image.max() <= 1.0
        assert np.all((scene.points[:, 0] >= 0) & (scene.points[:, 0] < 128))
        assert np.all((scene.points[:, 1] >= 0) & (scene.points[:, 1] < 96))


def test_generation_depends_only_on_seed_and_index() -> None:
    cfg = SynthConfig(n_min=3, n_max=9, seed=4)

    full = generate_scenes(cfg, 5)
    tail = generate_scenes(cfg, 2, offset=3)

    np.testing.assert_array_equal(full[3].image, tail[0].image)
    np.testing.assert_array_equal(full[4].points, tail[1].points)


def test_empty_scene_is_allowed() -> None:
    scene = _scene(n_min=0, n_max=0)

    assert scene.count == 0
    assert scene.points.shape == (0, 2)


def test_synth_config_rejects_inverted_ranges() -> None:
    with pytest.raises(ValueError):
        SynthConfig(n_min=10, n_max=5)
    with pytest.raises(ValueError):
        SynthConfig(radius_min=4.0, radius_max=2.0)


def test_scene_sample_rejects_point_count_mismatch() -> None:
    with pytest.raises(ValueError):
        SceneSample(image=np.zeros((3, 8, 8)), count=2, points=np.zeros((3, 2)))


def test_crop_tiles_partition_the_count() -> None:
    scene = _scene(seed=2)

    tiles = [crop(scene, top, left, 64) for top in (0, 64) for left in (0, 64)]

    assert sum(tile.count for tile in tiles) == scene.count
    for tile in tiles:
        assert tile.image.shape == (3, 64, 64)
        if tile.count:
            assert tile.points.min() >= 0.0 and tile.points.max() < 64.0


def test_crop_keeps_left_edge_and_drops_right_edge() -> None:
    scene = SceneSample(
        image=np.zeros((3, 16, 16)), count=2, points=np.array([[4.0, 4.0], [12.0, 4.0]])
    )

    kept = crop(scene, 0, 4, 8)

    assert kept.count == 1
    np.testing.assert_array_equal(kept.points, [[0.0, 4.0]])


def test_crop_must_fit_inside_the_image() -> None:
    with pytest.raises(ParameterError):
        crop(_scene(), 100, 0, 64)
    with pytest.raises(ParameterError):
        random_crop(_scene(), 256, RngState(0))


def test_crop_needs_object_centers() -> None:
    with pytest.raises(UnsupportedOperationError):
        crop(SceneSample(image=np.zeros((3, 32, 32)), count=4.0), 0, 0, 16)


def test_random_crop_is_reproducible() -> None:
    scene = _scene(seed=5)

    first = random_crop(scene, 64, RngState(1))
    second = random_crop(scene, 64, RngState(1))

    assert first.count == second.count
    np.testing.assert_array_equal(first.image, second.image)


def test_double_flip_restores_the_scene() -> None:
    scene = _scene(seed=6)

    twice = hflip(hflip(scene))

    np.testing.assert_array_equal(twice.image, scene.image)
    np.testing.assert_allclose(twice.points, scene.points)
    np.testing.assert_array_equal(hflip(scene).image[:, :, 0], scene.image[:, :, -1])


def test_random_crop_counts_match_a_recount() -> None:
    size, height, width = 48, 128, 128
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    rng = RngState(8)
    points = np.stack([rng.uniform(0.0, width, 60), rng.uniform(0.0, height, 60)], axis=1)
    scene = SceneSample(image=np.stack([rows, cols, rows]), count=60, points=points)

    for i in range(1000):
        cut = random_crop(scene, size, RngState(9).derive(i))
        top, left = int(cut.image[0, 0, 0]), int(cut.image[1, 0, 0])
        expected = 0
        for x, y in points:
            if left <= x < left + size and top <= y < top + size:
                expected += 1
        assert cut.count == expected, (top, left)


def test_flip_keeps_a_left_edge_point_inside_the_frame() -> None:
    scene = SceneSample(
        image=np.zeros((3, 16, 16)), count=2, points=np.array([[0.0, 3.0], [5.5, 8.0]])
    )

    flipped = hflip(scene)

    assert np.all(flipped.points[:, 0] >= 0.0) and np.all(flipped.points[:, 0] < 16.0)
    np.testing.assert_allclose(flipped.points[:, 0], [16.0, 10.5])
    assert crop(flipped, 0, 0, 16).count == 2


def test_augment_never_changes_the_count() -> None:
    scene = _scene(seed=7)
    for i in range(20):
        out = augment(scene, RngState(i))

        assert out.count == scene.count
        assert out.image.shape == scene.image.shape
        assert out.image.min() >= 0.0 and out.image.max() <= 1.0


@pytest.mark.parametrize(
    "shape,expected",
    [
        ((3, 1536, 2048), (3, 768, 1024)),
        ((3, 400, 500), (3, 768, 1024)),
        ((3, 500, 400), (3, 1024, 768)),
    ],
)
def test_resize_policy_maps_long_and_short_sides(shape, expected) -> None:
    assert resize_policy(np.zeros(shape, dtype=np.float32)).shape == expected


def test_fit_to_model_keeps_the_label() -> None:
    sample = SceneSample(image=np.full((3, 90, 150), 0.5), count=12.0)

    fitted = fit_to_model(sample, 128)

    assert fitted.image.shape == (3, 128, 128)
    assert fitted.count == 12.0
    np.testing.assert_allclose(fitted.image, 0.5, atol=1e-6)


def test_manifest_resolves_paths_against_its_directory(tmp_path: Path) -> None:
    manifest = tmp_path / "data" / "manifest.csv"
    manifest.parent.mkdir()
    manifest.write_text("image,count\na.png,3\n\nsub/b.png,12.5\n", encoding="utf-8")

    records = load_manifest(manifest)

    assert [r.path for r in records] == [manifest.parent / "a.png", manifest.parent / "sub/b.png"]
    assert [r.count for r in records] == [3.0, 12.5]


def test_empty_manifest_has_no_records(tmp_path: Path) -> None:
    manifest = tmp_path / "manifest.csv"
    manifest.write_text("", encoding="utf-8")

    assert load_manifest(manifest) == []


@pytest.mark.parametrize(
    "body,line",
    [
        ("path,total\na.png,3\n", 1),
        ("image,count\na.png,3\nb.png,many\n", 3),
        ("image,count\na.png,-1\n", 2),
        ("image,count\na.png,1,2\n", 2),
    ],
)
def test_malformed_manifest_names_the_line(tmp_path: Path, body: str, line: int) -> None:
    manifest = tmp_path / "manifest.csv"
    manifest.write_text(body, encoding="utf-8")

    with pytest.raises(ManifestError) as excinfo:
        load_manifest(manifest)

    assert excinfo.value.line == line
    assert f"manifest.csv:{line}" in str(excinfo.value)


def test_missing_manifest(tmp_path: Path) -> None:
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "absent.csv")


def test_saved_image_reloads_within_quantization(tmp_path: Path) -> None:
    image = _scene(seed=8).image

    loaded = load_image(save_image(tmp_path / "scene.png", image))

    assert loaded.shape == image.shape
    assert np.max(np.abs(loaded - image)) <= 0.5 / 255.0 + 1e-12


def test_unreadable_image(tmp_path: Path) -> None:
    broken = tmp_path / "broken.png"
    broken.write_bytes(b"not a png")

    with pytest.raises(ImageLoadError):
        load_image(broken)


def test_export_synthetic_writes_a_loadable_manifest(tmp_path: Path) -> None:
    cfg = SynthConfig(height=32, width=48, n_min=1, n_max=6, seed=2)

    manifest = export_synthetic(tmp_path / "synth", cfg, 3)
    records = load_manifest(manifest)

    assert [r.count for r in records] == [s.count for s in generate_scenes(cfg, 3)]
    assert all(r.path.exists() for r in records)
    assert load_image(records[0].path).shape == (3, 32, 48)
