"""Coarse-to-fine token streams built from frontend features and raw image patches."""

from __future__ import annotations

from dataclasses import dataclass

from crowd_mlp.engine.ops import check_mode, dropout, permute, reshape
from crowd_mlp.engine.rng import RngState, StackedRng
from crowd_mlp.engine.tensor import DimensionError, Tensor
from crowd_mlp.model.config import DOWNSAMPLE, PATCH_SIZES, STREAMS, stream_token_counts
from crowd_mlp.model.params import DenseParams, ParamStore

RAW_DROP_RATE = 0.2


@dataclass
class TokenStream:
    tokens: Tensor
    granularity: str
    patch_size: int

    @property
    def count(self) -> int:
        return self.tokens.shape[-2]


@dataclass
class ProjectionParams:
    projections: dict[str, DenseParams]


def split_reshape(x: Tensor, p: int) -> Tensor:
    """Split [..., C, S, S] into p×p patches flattened as [..., (S/p)², C·p²]."""
    if x.ndim < 3:
        raise DimensionError(f"split_reshape: input must be at least 3-D, got {x.shape}")
    *lead, channels, height, width = x.shape
    if p < 1 or height % p or width % p:
        raise DimensionError(f"split_reshape: extent {height}×{width} is not divisible by {p}")
    rows, cols = height // p, width // p
    k = len(lead)
    x = reshape(x, (*lead, channels, rows, p, cols, p))
    x = permute(x, (*range(k), k + 1, k + 3, k, k + 2, k + 4))
    return reshape(x, (*lead, rows * cols, channels * p * p))


def merge_patches(tokens: Tensor, channels: int, p: int, grid: tuple[int, int]) -> Tensor:
    """Exact inverse of :func:`split_reshape`."""
    *lead, count, dim = tokens.shape
    rows, cols = grid
    if count != rows * cols or dim != channels * p * p:
        raise DimensionError(
            f"merge_patches: tokens {tokens.shape} do not match grid {grid}, C={channels}, p={p}"
        )
    k = len(lead)
    x = reshape(tokens, (*lead, rows, cols, channels, p, p))
    x = permute(x, (*range(k), k + 2, k, k + 3, k + 1, k + 4))
    return reshape(x, (*lead, channels, rows * p, cols * p))


def raw_token_dropout(
    tokens: Tensor, rng: RngState | StackedRng | None, mode: str, rate: float = RAW_DROP_RATE
) -> Tensor:
    """Zero whole tokens (rows) with probability ``rate``, rescaling survivors."""
    return dropout(tokens, rate, rng, mode, shared_axes=(-1,))


def build_projections(
    store: ParamStore,
    *,
    feature_channels: int,
    token_dim: int,
    streams: tuple[str, ...] = STREAMS,
    image_channels: int = 3,
) -> ProjectionParams:
    projections = {}
    for stream in streams:
        p = PATCH_SIZES[stream]
        channels = image_channels if stream == "raw" else feature_channels
        projections[stream] = DenseParams.create(
            store, f"tokenizer.{stream}", channels * p * p, token_dim
        )
    return ProjectionParams(projections=projections)


def build_streams(
    image: Tensor,
    features: Tensor,
    proj: ProjectionParams,
    rng: RngState | StackedRng | None,
    mode: str,
    *,
    raw_drop_rate: float = RAW_DROP_RATE,
) -> dict[str, TokenStream]:
    """Feature streams from 16/8/4 patches of the feature map, raw 16×16 patches with dropout."""
    check_mode(mode)
    height, width = image.shape[-2:]
    if features.shape[-2:] != (height // DOWNSAMPLE, width // DOWNSAMPLE):
        raise DimensionError(
            f"build_streams: features {features.shape} are not at 1/8 of image {image.shape}"
        )
    stream_token_counts(height, tuple(proj.projections))

    streams = {}
    for name, dense in proj.projections.items():
        p = PATCH_SIZES[name]
        source = image if name == "raw" else features
        tokens = dense(split_reshape(source, p))
        if name == "raw":
            tokens = raw_token_dropout(tokens, rng, mode, raw_drop_rate)
        streams[name] = TokenStream(tokens=tokens, granularity=name, patch_size=p)
    return streams
