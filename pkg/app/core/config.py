import enum
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.core.errors import ConfigError
from app.schemas.gmm import CovarianceType

DEFAULT_SWEEP = [1, 2, 4, 8, 16]

EPOCH_RESCALING_NOTE = (
    "Datasets picked with a larger top-n hold proportionally more generated images. "
    "When training a detector on them, scale the number of epochs back with respect to "
    "the number of samples picked so every setting sees a comparable number of iterations."
)


class SpeMethod(str, enum.Enum):
    LLM = "llm"
    GMM_V1 = "gmm_v1"
    GMM_V2 = "gmm_v2"
    GTOS = "gtos"


# Spellings accepted by the command line
CLI_SPE_METHODS = {
    "llm": SpeMethod.LLM,
    "gmm1": SpeMethod.GMM_V1,
    "gmm2": SpeMethod.GMM_V2,
    "gtos": SpeMethod.GTOS,
}


class Picking(str, enum.Enum):
    LACS = "lacs"
    # keep the first n images of every batch, no ranking
    FIRST = "first"


class LlmSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    endpoint: str = "http://localhost:8000/v1"
    model: str = "mistralai/Mixtral-8x7B-Instruct-v0.1"
    api_key_env: str = "AUGMENT_LLM_API_KEY"
    temperature: float = Field(default=0.7, ge=0.0)
    max_tokens: int = Field(default=256, ge=1)
    max_retries: int = Field(default=3, ge=0)
    example_batch_size: int = Field(default=5, ge=1)
    canvas_width: int = Field(default=512, gt=0)
    canvas_height: int = Field(default=512, gt=0)
    template_path: Optional[str] = None
    timeout: float = 60.0
    workers: int = Field(default=1, ge=1)
    # Canned completions for the mock model, <request hash>.txt
    response_dir: Optional[str] = None


class GmmSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    components: int = Field(default=3, ge=1)
    covariance_type: CovarianceType = CovarianceType.FULL
    max_iters: int = Field(default=100, ge=1)
    tol: float = Field(default=1e-6, ge=0.0)
    reg: float = Field(default=1e-4, gt=0.0)
    box_retries: int = Field(default=10, ge=1)
    min_box_fraction: float = Field(default=0.02, gt=0.0, lt=1.0)
    workers: int = Field(default=1, ge=1)


class LisSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    endpoint: Optional[str] = None
    command: Optional[str] = None
    api_key_env: str = "AUGMENT_LIS_API_KEY"
    steps: int = Field(default=50, ge=1)
    guidance_scale: float = 7.5
    grounding_alpha: float = Field(default=0.8, ge=0.0, le=1.0)
    mis_fraction: float = Field(default=0.36, ge=0.0, le=1.0)
    timeout: float = 600.0
    max_in_flight: int = Field(default=2, ge=1)
    prompt_prefix: str = "a photo of "
    style_suffix: str = ""
    hallucination_rate: float = Field(default=0.3, ge=0.0, le=1.0)


class ScorerSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    model_id: str = "mock"
    device: str = "cpu"


class PipelineConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    annotations_path: Optional[str] = None
    shot_list_path: Optional[str] = None
    shots: Optional[int] = Field(default=None, ge=1)
    category_filter: Optional[List[str]] = None
    spe_method: SpeMethod = SpeMethod.LLM
    alpha: int = Field(default=4, ge=1)
    lis_batch: int = Field(default=5, ge=1)
    top_n: int = Field(default=1, ge=1)
    picking: Picking = Picking.LACS
    merge_real: bool = True
    seed: int = 0
    out_dir: str = "runs/default"
    mock: bool = False
    sweep: Optional[List[int]] = None
    topn_study: Optional[List[int]] = None
    topn_batch: int = Field(default=8, ge=1)
    heatmap_resolution: Tuple[int, int] = (64, 64)

    llm: LlmSettings = Field(default_factory=LlmSettings)
    gmm: GmmSettings = Field(default_factory=GmmSettings)
    lis: LisSettings = Field(default_factory=LisSettings)
    scorer: ScorerSettings = Field(default_factory=ScorerSettings)

    @field_validator("spe_method", mode="before")
    @classmethod
    def cli_spelling(cls, value):
        if isinstance(value, str) and value in CLI_SPE_METHODS:
            return CLI_SPE_METHODS[value]
        return value

    @field_validator("sweep")
    @classmethod
    def positive_ratios(cls, value):
        if value is not None:
            if not value:
                raise ValueError("sweep list must not be empty")
            if any(a < 1 for a in value):
                raise ValueError(f"augmentation ratios must be >= 1, got {value}")
        return value

    @field_validator("heatmap_resolution")
    @classmethod
    def positive_resolution(cls, value):
        if value[0] <= 0 or value[1] <= 0:
            raise ValueError(f"heatmap resolution must be positive, got {value}")
        return value

    @model_validator(mode="after")
    def top_n_within_batch(self):
        if self.top_n > self.lis_batch:
            raise ValueError(f"top_n ({self.top_n}) cannot exceed the synthesis batch ({self.lis_batch})")
        if self.topn_study is not None:
            if not self.topn_study:
                raise ValueError("topn_study list must not be empty")
            bad = [n for n in self.topn_study if not 1 <= n <= self.topn_batch]
            if bad:
                raise ValueError(f"topn_study values {bad} must lie in [1, {self.topn_batch}]")
        return self

    @property
    def canvas(self) -> Tuple[int, int]:
        return self.llm.canvas_width, self.llm.canvas_height


def _merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict):
            current = merged.get(key)
            nested = _merge(current if isinstance(current, dict) else {}, value)
            if nested:
                merged[key] = nested
        else:
            merged[key] = value
    return merged


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as err:
        raise ConfigError(f"cannot parse config {path}: {err}") from err
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a mapping at the top level")
    return data


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """Config file values, then non-None overrides (nested dicts merge key by key)."""
    data = read_config_file(path) if path is not None else {}
    data = _merge(data, overrides or {})
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(f"invalid configuration: {err}") from err
