import numpy as np
import pytest

from crowd_mlp.engine.ops import BN_EPS
from crowd_mlp.engine.rng import RngState
from crowd_mlp.engine.tensor import DimensionError, Tensor
from crowd_mlp.model.config import (
    ConfigurationError,
    ModelConfig,
    make_model_config,
    stream_token_counts,
)
from crowd_mlp.model.crowdmlp import build_model, predict_count, predict_with_embedding
from crowd_mlp.model.frontend import extract_features
from crowd_mlp.model.params import ParamStore
from crowd_mlp.model.regressor import MixingBlock, mixing_forward
from crowd_mlp.model.tokenizer import merge_patches, raw_token_dropout, split_reshape


def _tiny_config(**overrides: object) -> ModelConfig:
    values: dict[str, object] = {
        "image_size": 128,
        "token_dim": 16,
        "frontend": {"block_channels": [4, 8, 8], "reduced_channels": 8},
    }
    values.update(overrides)
    return make_model_config(**values)


def _images(n: int, size: int = 128, seed: int = 0) -> np.ndarray:
    return RngState(seed).random((n, 3, size, size))


def test_token_counts_follow_patch_geometry() -> None:
    assert stream_token_counts(256) == {"feat16": 4, "feat8": 16, "feat4": 64, "raw": 256}
    assert stream_token_counts(128) == {"feat16": 1, "feat8": 4, "feat4": 16, "raw": 64}


def test_image_too_small_for_coarsest_stream_is_rejected() -> None:
    with pytest.raises(ConfigurationError):
        make_model_config(image_size=64)


def test_small_image_is_accepted_once_the_coarse_stream_is_disabled() -> None:
    config = make_model_config(image_size=64, streams=["feat8", "feat4", "raw"])

    assert config.token_counts() == {"feat8": 1, "feat4": 4, "raw": 16}


def test_streams_are_kept_in_canonical_order() -> None:
    config = _tiny_config(streams=["raw", "feat4"])

    assert config.streams == ["feat4", "raw"]


def test_frontend_downsamples_by_eight() -> None:
    model = build_model(_tiny_config(), seed=1)

    single = extract_features(Tensor(_images(1)[0]), model.frontend, "eval")
    batched = extract_features(Tensor(_images(2)), model.frontend, "train")

    assert single.shape == (8, 16, 16)
    assert batched.shape == (2, 8, 16, 16)


def test_frontend_convs_feeding_normalization_have_no_bias() -> None:
    model = build_model(_tiny_config())

    conv_names = [n for n in model.params if n.startswith("frontend.block")]
    assert conv_names
    assert not any(n.endswith("conv0.bias") or n.endswith("conv1.bias") for n in conv_names)
    assert "frontend.reduce.bias" in model.params


def test_split_reshape_orders_tokens_row_major() -> None:
    x = np.arange(2 * 4 * 4, dtype=float).reshape(2, 4, 4)

    tokens = split_reshape(Tensor(x), 2)

    assert tokens.shape == (4, 8)
    np.testing.assert_array_equal(tokens.data[1], x[:, 0:2, 2:4].reshape(-1))
    np.testing.assert_array_equal(tokens.data[2], x[:, 2:4, 0:2].reshape(-1))


@pytest.mark.parametrize("p", [1, 4, 8])
def test_merge_patches_inverts_split_reshape(p: int) -> None:
    x = RngState(3).normal(0.0, 1.0, (2, 3, 8, 16))

    tokens = split_reshape(Tensor(x), p)
    restored = merge_patches(tokens, 3, p, (8 // p, 16 // p))

    np.testing.assert_array_equal(restored.data, x)


def test_split_reshape_rejects_indivisible_extent() -> None:
    with pytest.raises(DimensionError):
        split_reshape(Tensor(np.zeros((3, 10, 10))), 4)


def test_raw_token_dropout_zeroes_whole_tokens_in_train_mode_only() -> None:
    tokens = Tensor(np.ones((64, 16)))

    dropped = raw_token_dropout(tokens, RngState(5), "train")

    zero_rows = np.all(dropped.data == 0.0, axis=1)
    kept_rows = np.all(dropped.data == 1.0 / 0.8, axis=1)
    assert np.all(zero_rows | kept_rows)
    assert zero_rows.any() and kept_rows.any()
    assert raw_token_dropout(tokens, None, "eval") is tokens


def test_raw_token_dropout_rate_over_many_tokens() -> None:
    tokens = Tensor(np.ones((10_000, 4)))

    dropped = raw_token_dropout(tokens, RngState(11), "train", 0.2)

    fraction = float(np.mean(np.all(dropped.data == 0.0, axis=1)))
    assert abs(fraction - 0.2) <= 0.02


def test_zero_weight_mixing_block_reduces_to_normalization() -> None:
    store = ParamStore(RngState(1))
    block = MixingBlock.create(store, "mix", 6, 4, 0.1)
    block.fc1.weight.data[...] = 0.0
    block.fc2.weight.data[...] = 0.0
    rng = RngState(2)
    block.norm.gamma.data[...] = rng.uniform(0.5, 1.5, 6)
    block.norm.beta.data[...] = rng.normal(0.0, 1.0, 6)
    block.norm.running_mean[...] = rng.normal(0.0, 1.0, 6)
    block.norm.running_var[...] = rng.uniform(0.5, 2.0, 6)
    x = rng.normal(0.0, 1.0, (2, 5, 6))

    out = mixing_forward(block, Tensor(x), None, "eval")

    expected = (x - block.norm.running_mean) / np.sqrt(block.norm.running_var + BN_EPS)
    expected = expected * block.norm.gamma.data + block.norm.beta.data
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_bias_only_count_head_predicts_its_bias() -> None:
    model = build_model(_tiny_config())
    for param in model.params.values():
        param.data[...] = 0.0
    model.params["regressor.count_head.fc2.bias"].data[...] = 17.5

    for seed in (0, 1):
        counts = predict_count(model, Tensor(_images(2, seed=seed)), None, "eval")
        np.testing.assert_array_equal(counts.data, [17.5, 17.5])


def test_count_scale_multiplies_the_head_output() -> None:
    plain = build_model(_tiny_config(), seed=3)
    scaled = build_model(_tiny_config(count_scale=10.0), seed=3)
    images = Tensor(_images(2, seed=4))

    expected = 10.0 * predict_count(plain, images, None, "eval").data
    np.testing.assert_allclose(predict_count(scaled, images, None, "eval").data, expected)


def test_batch_renorm_is_threaded_through_every_normalizer() -> None:
    model = build_model(_tiny_config(batch_renorm=True, renorm_r_max=2.0, renorm_d_max=1.0))
    norms = [layer.norm for block in model.frontend.blocks for layer in block]
    norms += [block.token_mix.norm for block in model.regressor.top]

    assert all(norm.renorm == (2.0, 1.0) for norm in norms)
    assert build_model(_tiny_config()).frontend.blocks[0][0].norm.renorm is None


def test_prediction_is_one_scalar_per_example() -> None:
    model = build_model(_tiny_config())

    single = predict_count(model, Tensor(_images(1)[0]), None, "eval")
    batch = predict_count(model, Tensor(_images(3)), None, "eval")

    assert single.shape == ()
    assert batch.shape == (3,)


def test_eval_batch_matches_per_image_predictions() -> None:
    model = build_model(_tiny_config())
    images = _images(3, seed=2)

    batch = predict_count(model, Tensor(images), None, "eval")

    for i in range(3):
        single = predict_count(model, Tensor(images[i]), None, "eval")
        np.testing.assert_allclose(batch.data[i], single.data, rtol=1e-10, atol=1e-10)


def test_embedding_has_token_dim_features() -> None:
    model = build_model(_tiny_config())

    counts, pooled = predict_with_embedding(model, Tensor(_images(2)), None, "eval")

    assert counts.shape == (2,)
    assert pooled.shape == (2, 16)


def test_train_mode_is_reproducible_for_a_fixed_rng() -> None:
    model_a = build_model(_tiny_config(), seed=4)
    model_b = build_model(_tiny_config(), seed=4)
    images = Tensor(_images(2))

    first = predict_count(model_a, images, RngState(9), "train")
    second = predict_count(model_b, images, RngState(9), "train")

    np.testing.assert_array_equal(first.data, second.data)


def test_build_model_is_deterministic_per_seed() -> None:
    a = build_model(_tiny_config(), seed=7)
    b = build_model(_tiny_config(), seed=7)
    c = build_model(_tiny_config(), seed=8)

    assert list(a.params) == list(b.params)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
    assert any(
        not np.array_equal(a.params[n].data, c.params[n].data) for n in a.params if "kernel" in n
    )


def test_wrong_input_size_is_rejected() -> None:
    model = build_model(_tiny_config())

    with pytest.raises(DimensionError):
        predict_count(model, Tensor(_images(1, size=136)), None, "eval")


@pytest.mark.parametrize("disabled", ["raw", "feat16", "feat8", "feat4"])
def test_stream_ablation_shrinks_the_model(disabled: str) -> None:
    full = build_model(_tiny_config())
    streams = [s for s in full.config.streams if s != disabled]

    ablated = build_model(_tiny_config(streams=streams))
    prediction = predict_count(ablated, Tensor(_images(2)), None, "eval")

    assert ablated.parameter_count() < full.parameter_count()
    assert not any(f"tokenizer.{disabled}." in name for name in ablated.params)
    assert prediction.shape == (2,)
