"""Locally-focused convolutional frontend (MiniVGG) producing H/8 feature maps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from crowd_mlp.engine.ops import check_mode, conv2d, max_pool2, relu
from crowd_mlp.engine.tensor import DimensionError, Tensor
from crowd_mlp.model.config import DOWNSAMPLE, FrontendConfig
from crowd_mlp.model.params import BatchNormParams, ParamStore


@dataclass
class ConvBN:
    kernel: Tensor
    norm: BatchNormParams


@dataclass
class FrontendParams:
    blocks: list[list[ConvBN]]
    reduce_kernel: Tensor
    reduce_bias: Tensor


def build_frontend(
    store: ParamStore, config: FrontendConfig, in_channels: int = 3
) -> FrontendParams:
    blocks: list[list[ConvBN]] = []
    channels = in_channels
    for b, width in enumerate(config.block_channels):
        layers = []
        for c in range(config.convs_per_block):
            prefix = f"frontend.block{b}.conv{c}"
            kernel = store.kaiming(f"{prefix}.kernel", (width, channels, 3, 3), fan_in=channels * 9)
            layers.append(ConvBN(kernel, BatchNormParams.create(store, f"{prefix}.bn", width)))
            channels = width
        blocks.append(layers)
    reduce_kernel = store.kaiming(
        "frontend.reduce.kernel", (config.reduced_channels, channels, 1, 1), fan_in=channels
    )
    reduce_bias = store.zeros("frontend.reduce.bias", (config.reduced_channels,))
    return FrontendParams(blocks=blocks, reduce_kernel=reduce_kernel, reduce_bias=reduce_bias)


def extract_features(image: Tensor, params: FrontendParams, mode: str) -> Tensor:
    """Map a 3×H×W image (or N×3×H×W batch) to reduced_channels×H/8×W/8 features."""
    check_mode(mode)
    height, width = image.shape[-2:]
    if height % DOWNSAMPLE or width % DOWNSAMPLE:
        raise DimensionError(f"Frontend input {height}×{width} must be divisible by {DOWNSAMPLE}")

    x = image
    for block in params.blocks:
        for layer in block:
            x = conv2d(x, layer.kernel, None, stride=1, padding=1)
            x = relu(layer.norm(x, mode, axis=-3))
        x = max_pool2(x)
    return conv2d(x, params.reduce_kernel, params.reduce_bias, stride=1, padding=0)


def load_frontend_weights(store: ParamStore, path: str | Path) -> int:
    """Copy ``frontend.*`` arrays from a checkpoint into ``store``; returns how many were loaded."""
    from crowd_mlp.training.checkpoint import load_arrays_into

    return load_arrays_into(store, path, prefix="frontend.")
