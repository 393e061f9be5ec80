"""Model configuration and the stream geometry it implies."""

from __future__ import annotations

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

DOWNSAMPLE = 8
STREAMS: tuple[str, ...] = ("feat16", "feat8", "feat4", "raw")
PATCH_SIZES: dict[str, int] = {"feat16": 16, "feat8": 8, "feat4": 4, "raw": 16}
MIN_IMAGE_SIZE = 128


class ConfigurationError(ValueError):
    """Raised when a configuration cannot produce a valid network or run."""


def stream_token_counts(image_size: int, streams: tuple[str, ...] = STREAMS) -> dict[str, int]:
    """Token count per enabled stream for an H×H input."""
    if image_size % DOWNSAMPLE:
        raise ConfigurationError(f"Image size {image_size} must be divisible by {DOWNSAMPLE}")
    counts = {}
    for stream in streams:
        if stream not in PATCH_SIZES:
            raise ConfigurationError(f"Unknown stream {stream!r}; expected one of {STREAMS}")
        p = PATCH_SIZES[stream]
        grid = image_size if stream == "raw" else image_size // DOWNSAMPLE
        if grid < p or grid % p:
            raise ConfigurationError(
                f"Image size {image_size} leaves stream {stream!r} without whole {p}×{p} "
                f"patches; use a multiple of {MIN_IMAGE_SIZE}"
            )
        counts[stream] = (grid // p) ** 2
    return counts


class FrontendConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    block_channels: list[int] = Field(default_factory=lambda: [16, 32, 64])
    convs_per_block: int = Field(default=2, ge=1)
    reduced_channels: int = Field(default=32, ge=1)
    weights_path: str | None = None

    @field_validator("block_channels")
    @classmethod
    def _three_blocks(cls, value: list[int]) -> list[int]:
        # Three pooling stages fix the downsampling factor at 8.
        if len(value) != 3:
            raise ValueError("block_channels must list exactly 3 block widths")
        if any(width < 1 for width in value):
            raise ValueError("block widths must be >= 1")
        return value


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_size: int = Field(default=128, ge=8)
    token_dim: int = Field(default=64, ge=2)
    frontend: FrontendConfig = Field(default_factory=FrontendConfig)
    streams: list[str] = Field(default_factory=lambda: list(STREAMS))
    mixer_dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    raw_drop_rate: float = Field(default=0.2, ge=0.0, lt=1.0)
    token_hidden_ratio: float = Field(default=1.0, gt=0.0)
    channel_hidden_ratio: float = Field(default=2.0, gt=0.0)
    head_depth: int = Field(default=1, ge=1)
    top_depth: int = Field(default=3, ge=1)
    count_scale: float = Field(default=1.0, gt=0.0)
    batch_renorm: bool = False
    renorm_r_max: float = Field(default=3.0, ge=1.0)
    renorm_d_max: float = Field(default=5.0, ge=0.0)

    @field_validator("streams")
    @classmethod
    def _known_streams(cls, value: list[str]) -> list[str]:
        if not value:
            raise ValueError("at least one token stream must stay enabled")
        unknown = [s for s in value if s not in STREAMS]
        if unknown:
            raise ValueError(f"unknown streams {unknown}; expected a subset of {list(STREAMS)}")
        if len(set(value)) != len(value):
            raise ValueError("streams must not repeat")
        # Canonical order keeps the joined token layout independent of flag order.
        return [s for s in STREAMS if s in value]

    @model_validator(mode="after")
    def _geometry(self) -> ModelConfig:
        stream_token_counts(self.image_size, tuple(self.streams))
        return self

    def token_counts(self) -> dict[str, int]:
        return stream_token_counts(self.image_size, tuple(self.streams))

    def renorm_limits(self) -> tuple[float, float] | None:
        """Clip limits (r_max, d_max) for train-mode batch renormalization, if enabled."""
        return (self.renorm_r_max, self.renorm_d_max) if self.batch_renorm else None


def make_model_config(**values: object) -> ModelConfig:
    """Build a ModelConfig, reporting validation failures as ConfigurationError."""
    try:
        return ModelConfig.model_validate(values)
    except ValidationError as exc:
        raise ConfigurationError(describe_validation_error(exc)) from exc


def describe_validation_error(exc: ValidationError) -> str:
    errors = exc.errors()
    if not errors:
        return str(exc)
    first = errors[0]
    location = ".".join(str(part) for part in first.get("loc", ()))
    message = first.get("msg", "invalid value")
    return f"{location}: {message}" if location else message
