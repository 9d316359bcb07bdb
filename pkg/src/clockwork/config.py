"""Run configuration: one JSON document, every field defaulted except the seed."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigurationError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSection(_Section):
    image_size: int = Field(16, ge=8)
    num_classes: int = Field(16, ge=0, le=16)
    enabled: bool = True  # image generator available (unrolled distillation never needs it)


class UNetSection(_Section):
    channels: list[int] = [16, 32, 64]
    cutoff_stage: int = Field(1, ge=1)
    time_embed_dim: int = 64
    groups: int = 8
    attention_at: list[int] | None = None
    efficient: bool = False


class AdaptorSection(_Section):
    kind: Literal["identity", "resnet", "unet_light"] = "resnet"
    channels: int | None = None  # 64 for resnet, 24 for unet_light
    inputs: list[Literal["r_in", "r_out_prev", "t_emb", "c_emb"]] = ["r_in", "r_out_prev", "t_emb", "c_emb"]
    blocks: int = 2


class ClockSection(_Section):
    schedule: Union[int, str, list[int]] = 2

    @field_validator("schedule")
    @classmethod
    def _valid_clock(cls, v):
        from .clockwork import make_clock

        make_clock(v)  # raises on step-1 adaptor requests and unparsable specs
        return v


class SamplerSection(_Section):
    solver: Literal["ddim", "dpmpp2m", "dpm2m"] = "dpmpp2m"
    steps: int = Field(8, ge=1)
    guidance: float = 3.0
    schedule: Literal["linear", "cosine"] = "linear"
    T_train: int = Field(1000, ge=10)
    num_samples: int = Field(64, ge=1)


class TrainSection(_Section):
    base_steps: int = Field(4000, ge=1)
    base_batch: int = 32
    base_lr: float = 1e-3
    cond_dropout: float = Field(0.1, ge=0, le=1)
    epochs: int = Field(4, ge=1)
    batch_size: int = 16
    lr: float = 1e-3
    trajectories_per_epoch: int = 256
    regenerate: bool = False


class AnalysisSection(_Section):
    sites: list[str] = ["up2", "up1", "up0"]
    alphas: list[float] = [1.0, 0.7, 0.3, 0.0]
    start_steps: list[int] = [0, 2, 4, 6]
    num_seeds: int = Field(8, ge=1)
    reference_size: int = Field(512, ge=64)

    @field_validator("alphas")
    @classmethod
    def _alpha_range(cls, v):
        if any(not 0.0 <= a <= 1.0 for a in v):
            raise ValueError("alphas must lie in [0, 1]")
        return v


class CostSection(_Section):
    latency_iters: int = Field(5, ge=1)
    latency_warmup: int = Field(1, ge=0)


class RunConfig(_Section):
    seed: int
    name: str = "default"
    dataset: DatasetSection = DatasetSection()
    unet: UNetSection = UNetSection()
    adaptor: AdaptorSection = AdaptorSection()
    clock: ClockSection = ClockSection()
    sampler: SamplerSection = SamplerSection()
    train: TrainSection = TrainSection()
    analysis: AnalysisSection = AnalysisSection()
    cost: CostSection = CostSection()

    def unet_config(self):
        from .unet import UNetConfig

        u = self.unet
        return UNetConfig(image_size=self.dataset.image_size, channels=tuple(u.channels), cutoff_stage=u.cutoff_stage,
                          attention_at=None if u.attention_at is None else tuple(u.attention_at),
                          efficient=u.efficient, num_classes=self.dataset.num_classes,
                          time_embed_dim=u.time_embed_dim, groups=u.groups)

    def adaptor_spec(self):
        from .adaptor import AdaptorSpec

        ucfg = self.unet_config()
        width = self.adaptor.channels or (24 if self.adaptor.kind == "unet_light" else 64)
        return AdaptorSpec(kind=self.adaptor.kind, channels=width,
                           feature_channels=ucfg.channels[ucfg.cutoff_stage - 1], emb_dim=ucfg.emb_dim,
                           inputs=tuple(self.adaptor.inputs), blocks=self.adaptor.blocks, groups=ucfg.groups)

    def schedule(self):
        from .sampler import make_schedule

        return make_schedule(self.sampler.schedule, self.sampler.T_train)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)


def parse_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid config: {e}") from None


def load_config(path: str | Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from None
    return parse_config(data)


def set_path(data: dict, dotted: str, value) -> None:
    """Apply a flag override such as ``sampler.steps`` onto a raw config dict."""
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value
