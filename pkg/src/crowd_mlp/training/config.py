"""Training run configuration."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from crowd_mlp.data.synth import SynthConfig
from crowd_mlp.model.config import STREAMS, ModelConfig, make_model_config

MILESTONE_FRACTIONS = (0.6, 0.85)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(default=1e-5, gt=0.0)
    batch_size: int = Field(default=12, ge=1)
    crop_size: int = Field(default=256, ge=8)
    epochs: int = Field(default=100, ge=1)
    milestones: list[int] | None = None
    gamma: float = Field(default=0.5, gt=0.0, le=1.0)
    seed: int = Field(default=0, ge=0)
    max_steps: int | None = Field(default=None, ge=1)
    clip_norm: float | None = Field(default=None, gt=0.0)

    model: ModelConfig = Field(default_factory=lambda: ModelConfig(image_size=256))
    disabled_streams: list[str] = Field(default_factory=list)
    use_proxy: bool = True
    augment: bool = True
    raw_drop_schedule: Literal["per_pass", "per_epoch"] = "per_pass"

    synth: SynthConfig = Field(default_factory=lambda: SynthConfig(height=320, width=320))
    num_scenes: int = Field(default=32, ge=1)
    manifest: str | None = None
    val_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)

    out_dir: str = "runs/crowdmlp"

    @field_validator("milestones")
    @classmethod
    def _increasing(cls, value: list[int] | None) -> list[int] | None:
        if value is None:
            return value
        if any(m < 0 for m in value):
            raise ValueError("milestones must be nonnegative epoch indices")
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("milestones must be strictly increasing")
        return value

    @field_validator("disabled_streams")
    @classmethod
    def _known_streams(cls, value: list[str]) -> list[str]:
        unknown = [s for s in value if s not in STREAMS]
        if unknown:
            raise ValueError(f"unknown streams {unknown}; expected a subset of {list(STREAMS)}")
        return sorted(set(value), key=STREAMS.index)

    @model_validator(mode="after")
    def _consistent(self) -> TrainConfig:
        if self.model.image_size != self.crop_size:
            raise ValueError(
                f"model.image_size ({self.model.image_size}) "
                f"must equal crop_size ({self.crop_size})"
            )
        if self.manifest is None and min(self.synth.height, self.synth.width) < self.crop_size:
            raise ValueError("synthetic scenes must be at least crop_size on each side")
        if not [s for s in self.model.streams if s not in self.disabled_streams]:
            raise ValueError("disabled_streams leaves no token stream enabled")
        return self

    def resolved_milestones(self) -> list[int]:
        if self.milestones is not None:
            return list(self.milestones)
        resolved = sorted({max(1, round(f * self.epochs)) for f in MILESTONE_FRACTIONS})
        return [m for m in resolved if m < self.epochs]

    def run_model_config(self) -> ModelConfig:
        """The model configuration with ablated streams removed."""
        values = self.model.model_dump()
        values["streams"] = [s for s in self.model.streams if s not in self.disabled_streams]
        return make_model_config(**values)
