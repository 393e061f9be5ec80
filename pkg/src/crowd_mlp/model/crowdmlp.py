"""The assembled counter: frontend -> token streams -> multi-granularity MLP -> count."""

from __future__ import annotations

from dataclasses import dataclass

from crowd_mlp.engine.ops import check_mode
from crowd_mlp.engine.rng import RngState, StackedRng
from crowd_mlp.engine.tensor import DimensionError, Tensor
from crowd_mlp.log import logger
from crowd_mlp.model.config import ModelConfig
from crowd_mlp.model.frontend import (
    FrontendParams,
    build_frontend,
    extract_features,
    load_frontend_weights,
)
from crowd_mlp.model.params import ParamStore
from crowd_mlp.model.regressor import (
    RegressorParams,
    build_regressor,
    encode_streams,
    refine_and_count,
)
from crowd_mlp.model.tokenizer import ProjectionParams, build_projections, build_streams


@dataclass
class CrowdMLP:
    config: ModelConfig
    store: ParamStore
    frontend: FrontendParams
    projections: ProjectionParams
    regressor: RegressorParams

    @property
    def params(self) -> dict[str, Tensor]:
        return self.store.params

    @property
    def buffers(self):
        return self.store.buffers

    def parameter_count(self) -> int:
        return self.store.parameter_count()


def build_model(config: ModelConfig, seed: int = 0) -> CrowdMLP:
    """Create every parameter deterministically from ``seed``.

    Names are derived from the architecture, so two builds with the same config and
    seed hold identical values regardless of construction order.
    """
    store = ParamStore(RngState(seed).derive("init"), renorm=config.renorm_limits())
    frontend = build_frontend(store, config.frontend)
    projections = build_projections(
        store,
        feature_channels=config.frontend.reduced_channels,
        token_dim=config.token_dim,
        streams=tuple(config.streams),
    )
    regressor = build_regressor(store, config)
    model = CrowdMLP(
        config=config,
        store=store,
        frontend=frontend,
        projections=projections,
        regressor=regressor,
    )
    if config.frontend.weights_path:
        loaded = load_frontend_weights(store, config.frontend.weights_path)
        logger.info("Loaded %d frontend arrays from %s", loaded, config.frontend.weights_path)
    return model


def predict_with_embedding(
    model: CrowdMLP,
    images: Tensor,
    rng: RngState | None,
    mode: str,
    *,
    raw_rng: RngState | StackedRng | None = None,
) -> tuple[Tensor, Tensor]:
    """Return (count, mean-pooled embedding) for a 3×H×H image or an N×3×H×H batch.

    ``rng`` addresses dropout masks by key, so pass a fresh derivation per pass.
    ``raw_rng`` overrides the stream used for raw-token dropout.
    """
    check_mode(mode)
    size = model.config.image_size
    if images.ndim not in (3, 4) or images.shape[-3:] != (3, size, size):
        raise DimensionError(f"Model expects 3×{size}×{size} inputs, got {images.shape}")
    if raw_rng is None and rng is not None:
        raw_rng = rng.derive("raw")
    features = extract_features(images, model.frontend, mode)
    streams = build_streams(
        images,
        features,
        model.projections,
        raw_rng,
        mode,
        raw_drop_rate=model.config.raw_drop_rate,
    )
    regressor_rng = rng.derive("regressor") if rng is not None else None
    joint = encode_streams(streams, model.regressor, regressor_rng, mode)
    return refine_and_count(joint, model.regressor, regressor_rng, mode)


def predict_count(
    model: CrowdMLP,
    images: Tensor,
    rng: RngState | None,
    mode: str,
    *,
    raw_rng: RngState | StackedRng | None = None,
) -> Tensor:
    counts, _ = predict_with_embedding(model, images, rng, mode, raw_rng=raw_rng)
    return counts
