"""Multi-granularity MLP regressor: per-stream heads, joint top encoder, scalar count head."""

from __future__ import annotations

from dataclasses import dataclass

from crowd_mlp.engine.ops import (
    add,
    check_mode,
    concat,
    dropout,
    reduce_mean,
    relu,
    reshape,
    scale,
    transpose,
)
from crowd_mlp.engine.rng import RngState
from crowd_mlp.engine.tensor import DimensionError, Tensor
from crowd_mlp.model.config import STREAMS, ConfigurationError, ModelConfig
from crowd_mlp.model.params import BatchNormParams, DenseParams, ParamStore
from crowd_mlp.model.tokenizer import TokenStream


@dataclass
class MixingBlock:
    fc1: DenseParams
    fc2: DenseParams
    norm: BatchNormParams
    drop_rate: float

    @classmethod
    def create(
        cls, store: ParamStore, prefix: str, dim: int, hidden: int, drop_rate: float
    ) -> MixingBlock:
        return cls(
            fc1=DenseParams.create(store, f"{prefix}.fc1", dim, hidden),
            fc2=DenseParams.create(store, f"{prefix}.fc2", hidden, dim),
            norm=BatchNormParams.create(store, f"{prefix}.bn", dim),
            drop_rate=drop_rate,
        )

    @property
    def dim(self) -> int:
        return self.fc1.weight.shape[0]


@dataclass
class TmlpBlock:
    token_mix: MixingBlock
    channel_mix: MixingBlock

    @classmethod
    def create(
        cls, store: ParamStore, prefix: str, count: int, dim: int, config: ModelConfig
    ) -> TmlpBlock:
        token_hidden = max(1, round(config.token_hidden_ratio * count))
        channel_hidden = max(1, round(config.channel_hidden_ratio * dim))
        return cls(
            token_mix=MixingBlock.create(
                store, f"{prefix}.token_mix", count, token_hidden, config.mixer_dropout
            ),
            channel_mix=MixingBlock.create(
                store, f"{prefix}.channel_mix", dim, channel_hidden, config.mixer_dropout
            ),
        )


@dataclass
class CountHead:
    fc1: DenseParams
    fc2: DenseParams
    count_scale: float = 1.0


@dataclass
class RegressorParams:
    heads: dict[str, list[TmlpBlock]]
    top: list[TmlpBlock]
    count_head: CountHead


def build_regressor(store: ParamStore, config: ModelConfig) -> RegressorParams:
    counts = config.token_counts()
    dim = config.token_dim
    heads = {
        stream: [
            TmlpBlock.create(store, f"regressor.head.{stream}.{i}", counts[stream], dim, config)
            for i in range(config.head_depth)
        ]
        for stream in config.streams
    }
    joint = sum(counts.values())
    top = [
        TmlpBlock.create(store, f"regressor.top.{i}", joint, dim, config)
        for i in range(config.top_depth)
    ]
    hidden = max(1, dim // 2)
    count_head = CountHead(
        fc1=DenseParams.create(store, "regressor.count_head.fc1", dim, hidden),
        fc2=DenseParams.create(store, "regressor.count_head.fc2", hidden, 1),
        count_scale=config.count_scale,
    )
    return RegressorParams(heads=heads, top=top, count_head=count_head)


def mixing_forward(block: MixingBlock, x: Tensor, rng: RngState | None, mode: str) -> Tensor:
    """F = drop(relu(f1 X)); F = drop(relu(f2 F)); Y = BN(F + X), along the last axis of X."""
    if x.shape[-1] != block.dim:
        raise DimensionError(f"mixing block expects last axis {block.dim}, got {x.shape}")
    f = dropout(relu(block.fc1(x)), block.drop_rate, _child(rng, "fc1"), mode)
    f = dropout(relu(block.fc2(f)), block.drop_rate, _child(rng, "fc2"), mode)
    return block.norm(add(f, x), mode, axis=-1)


def tmlp_forward(block: TmlpBlock, tokens: Tensor, rng: RngState | None, mode: str) -> Tensor:
    """Token mixing across the count axis, then channel mixing across D; shape preserved."""
    mixed = transpose(tokens, -1, -2)
    mixed = mixing_forward(block.token_mix, mixed, _child(rng, "token"), mode)
    mixed = transpose(mixed, -1, -2)
    return mixing_forward(block.channel_mix, mixed, _child(rng, "channel"), mode)


def encode_streams(
    streams: dict[str, TokenStream], params: RegressorParams, rng: RngState | None, mode: str
) -> Tensor:
    """Run each stream through its head and join the results along the token axis."""
    check_mode(mode)
    missing = [name for name in params.heads if name not in streams]
    if missing:
        raise ConfigurationError(f"Streams {missing} are missing and not disabled by ablation")
    unexpected = [name for name in streams if name not in params.heads]
    if unexpected:
        raise ConfigurationError(f"Streams {unexpected} have no head; the model disables them")

    embeddings = []
    for name in STREAMS:
        if name not in params.heads:
            continue
        x = streams[name].tokens
        for depth, block in enumerate(params.heads[name]):
            x = tmlp_forward(block, x, _child(rng, f"head.{name}.{depth}"), mode)
        embeddings.append(x)
    return concat(embeddings, axis=-2)


def refine_and_count(
    joint: Tensor, params: RegressorParams, rng: RngState | None, mode: str
) -> tuple[Tensor, Tensor]:
    """Top mixing blocks, mean-pool over tokens, then D -> D/2 -> 1 times count_scale.

    Returns (counts, pooled).
    """
    pooled_joint = reduce_mean(joint, axis=-2)
    x = joint
    for depth, block in enumerate(params.top):
        x = tmlp_forward(block, x, _child(rng, f"top.{depth}"), mode)
    pooled = reduce_mean(x, axis=-2)
    hidden = relu(params.count_head.fc1(pooled))
    out = scale(params.count_head.fc2(hidden), params.count_head.count_scale)
    return reshape(out, out.shape[:-1]), pooled_joint


def regress_count(
    streams: dict[str, TokenStream], params: RegressorParams, rng: RngState | None, mode: str
) -> Tensor:
    """One count per example: unclamped, any sign."""
    joint = encode_streams(streams, params, rng, mode)
    counts, _ = refine_and_count(joint, params, rng, mode)
    return counts


def _child(rng: RngState | None, key: str) -> RngState | None:
    return rng.derive(key) if rng is not None else None
