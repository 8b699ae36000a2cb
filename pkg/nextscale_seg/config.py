"""
Run configuration. A single JSON (or YAML) document holds the dataset spec, the model dimensions, one training
config per stage, the sampling settings, the metric protocol and the ablation switches. Unknown keys are rejected.
"""
import json

from typing import List, Literal, Optional, Tuple

import yaml

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigurationError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DatasetSpec(_Strict):
    image_size: int = 64
    image_channels: int = Field(1, ge=1)
    num_classes: int = Field(1, ge=1)
    annotators: int = Field(4, ge=1)
    train: int = Field(400, ge=0)
    val: int = Field(50, ge=0)
    test: int = Field(50, ge=0)
    # Boundary jitter in pixels (std of the smooth boundary noise field).
    boundary_jitter: float = Field(1.5, ge=0)
    # Per-annotator erosion/dilation, in units of boundary_jitter.
    annotator_bias: float = Field(1.0, ge=0)
    texture_noise: float = Field(0.05, ge=0)
    seed: int = 0

    @field_validator("image_size")
    @classmethod
    def _power_of_two(cls, value):
        if value < 32 or value & (value - 1):
            raise ValueError("image_size must be a power of two >= 32")
        return value


class ModelConfig(_Strict):
    codebook_size: int = Field(512, ge=2)
    code_dim: int = Field(32, ge=1)
    latent_size: int = Field(16, ge=1)
    num_scales: int = Field(8, ge=1)
    # Explicit (h, w) resolutions; derived from latent_size/num_scales when omitted.
    scales: Optional[List[Tuple[int, int]]] = None
    ae_hidden: int = Field(32, ge=1)
    image_feature_dim: int = Field(64, ge=1)
    svd_rank: int = Field(4, ge=1)
    adapter_hidden: int = Field(128, ge=1)
    freeze_backbone: bool = False
    width: int = Field(128, ge=1)
    depth: int = Field(6, ge=0)
    heads: int = Field(4, ge=1)
    mlp_ratio: float = Field(4.0, gt=0)
    codebook_seed: int = 0

    @model_validator(mode="after")
    def _check_heads(self):
        if self.width % self.heads:
            raise ValueError("heads ({}) must divide width ({})".format(self.heads, self.width))
        return self


class TrainConfig(_Strict):
    stage: Literal[1, 2] = 1
    epochs: int = Field(40, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(1e-4, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    betas: Tuple[float, float] = (0.9, 0.95)
    beta: float = Field(0.25, ge=0)
    lambda_dice: float = Field(1.0, ge=0)
    lambda_bce: float = Field(1.0, ge=0)
    schedule: Literal["cosine", "constant"] = "cosine"
    grad_clip: Optional[float] = Field(1.0, gt=0)
    seed: int = 0
    checkpoint_every: int = Field(1, ge=1)
    max_steps: Optional[int] = Field(None, ge=1)
    cache_dir: Optional[str] = None


class SamplingConfig(_Strict):
    n: int = Field(16, ge=1)
    temperature: float = Field(1.0, gt=0)
    top_k: int = Field(0, ge=0)
    seed: int = 0


class MetricConfig(_Strict):
    sample_counts: List[int] = [1, 4, 8, 16]
    annotators: int = Field(4, ge=1)

    @field_validator("sample_counts")
    @classmethod
    def _positive_counts(cls, value):
        if not value or any(n < 1 for n in value):
            raise ValueError("sample_counts must be a non-empty list of positive integers")
        return sorted(set(value))


class AblationConfig(_Strict):
    """Each switch, when true, replaces a mechanism by its baseline arm; all false is the full model."""
    single_scale: bool = False
    next_token: bool = False
    # True drops the SVD branch, leaving the MLP-only adapter.
    svd_adapter: bool = False


def _stage2_defaults():
    return TrainConfig(stage=2, epochs=80, batch_size=16, weight_decay=0.05)


class RunConfig(_Strict):
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    model: ModelConfig = Field(default_factory=ModelConfig)
    stage1: TrainConfig = Field(default_factory=TrainConfig)
    stage2: TrainConfig = Field(default_factory=_stage2_defaults)
    sampling: SamplingConfig = Field(default_factory=SamplingConfig)
    metrics: MetricConfig = Field(default_factory=MetricConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)

    @model_validator(mode="after")
    def _check_stages(self):
        if self.stage1.stage != 1 or self.stage2.stage != 2:
            raise ValueError("stage1/stage2 must carry stage tags 1 and 2")
        if self.dataset.image_size % self.model.latent_size:
            raise ValueError("model.latent_size must divide dataset.image_size")
        return self


# region Loading


def _error_path(error):
    loc = ".".join(str(item) for item in error.get("loc", ()))
    return loc if loc else "<root>"


def parse_config(data):
    """
    Validate a raw mapping against the RunConfig schema.
    :param data: dict parsed from JSON/YAML
    :return: RunConfig
    """
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError("config root must be a mapping, got {}".format(type(data).__name__))
    try:
        return RunConfig.model_validate(data)
    except ValidationError as ex:
        first = ex.errors()[0]
        raise ConfigurationError("invalid config key '{}': {}".format(_error_path(first), first["msg"]))


def load_config(path):
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as ex:
        raise ConfigurationError("{}: cannot parse config ({})".format(path, ex))
    return parse_config(data)


def dump_config(config):
    return json.loads(config.model_dump_json())


def config_schema():
    return RunConfig.model_json_schema()

# endregion
