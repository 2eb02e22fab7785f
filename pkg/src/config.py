# src/config.py
from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .distributions import DEFAULT_FICO, Beta, Categorical, FicoBuckets, LogNormal
from .errors import ConfigError

load_dotenv()


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", extra="ignore")

    output_dir: str = "./out"
    config_path: str = "config/default.yaml"
    template_path: str = str(Path(__file__).resolve().parent.parent / "templates" / "roof_prompt.txt")
    n_jobs: int = 1


settings = Settings()

OUTPUT_DIR = settings.output_dir
CONFIG_PATH = settings.config_path
TEMPLATE_PATH = settings.template_path
N_JOBS = settings.n_jobs


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# =========================
# 생성 설정 (정책 특성 + 잠재 점수 + 손해 모형 계수)
# =========================
class ScoreCoeffs(_Strict):
    age_coeff: float = 0.02
    risk_coeff: float = 3.0
    credit_coeff: float = -2.0
    credit_denominator: float = 850.0
    noise_sigma: float = Field(1.0, ge=0)

    @field_validator("credit_denominator")
    @classmethod
    def _nonzero(cls, v: float) -> float:
        if v == 0:
            raise ValueError("credit_denominator must be nonzero")
        return v


class Thresholds(_Strict):
    fair_percentile: float = 55.0
    bad_percentile: float = 80.0

    @model_validator(mode="after")
    def _ordered(self):
        if not (0 < self.fair_percentile < self.bad_percentile < 100):
            raise ValueError("thresholds must satisfy 0 < fair_percentile < bad_percentile < 100")
        return self

    def class_proportions(self) -> tuple[float, float, float]:
        fair = self.fair_percentile / 100.0
        bad = self.bad_percentile / 100.0
        return fair, bad - fair, 1.0 - bad


class FrequencyCoeffs(_Strict):
    intercept: float = -3.0
    log_value_coeff: float = 0.03
    value_ref: float = Field(250_000.0, gt=0)
    age_coeff: float = 0.01
    risk_coeff: float = 0.05
    alpha_rh: tuple[float, float, float] = (0.0, 1.2, 2.4)
    nb_r: float = Field(10.0, gt=0)


class SeverityCoeffs(_Strict):
    intercept: float = 7.0
    wood_coeff: float = 0.02
    risk_coeff: float = 0.02
    beta_rh: tuple[float, float, float] = (0.0, 1.0, 2.0)
    gamma_k: float = Field(2.0, gt=0)


class GenerationConfig(_Strict):
    n_policies: int = Field(2000, ge=1)
    value_params: LogNormal = LogNormal(12.9, 0.45)
    age_scale: float = Field(120.0, gt=0)
    age_beta_params: Beta = Beta(4.0, 3.0)
    wall_probs: Categorical = Categorical(labels=("Wood", "Brick"), probs=(0.9, 0.1))
    risk_beta_params: Beta = Beta(2.0, 5.0)
    fico_params: FicoBuckets = DEFAULT_FICO
    score_coeffs: ScoreCoeffs = ScoreCoeffs()
    thresholds: Thresholds = Thresholds()
    frequency_coeffs: FrequencyCoeffs = FrequencyCoeffs()
    severity_coeffs: SeverityCoeffs = SeverityCoeffs()
    master_seed: int = Field(0, ge=0, lt=2**64)

    @field_validator("wall_probs")
    @classmethod
    def _wall_labels(cls, v: Categorical) -> Categorical:
        if set(v.labels) != {"Wood", "Brick"}:
            raise ValueError("wall_probs labels must be exactly Wood and Brick")
        return v


# =========================
# 채널 / 모델 / 실험 설정
# =========================
STYLE_DIRECTIONS = 10
ConfusionMode = Literal["uniform", "adjacent"]
TierName = Literal["tabular_only", "cluster_labels", "embedding_features", "noisy_label", "true_label", "oracle"]
TIER_ORDER: tuple[str, ...] = (
    "tabular_only", "cluster_labels", "embedding_features", "noisy_label", "true_label", "oracle",
)


class NoisyLabelParams(_Strict):
    channel: Literal["noisy_label"] = "noisy_label"
    accuracy: Optional[float] = Field(None, ge=1 / 3, le=1)
    target_correlation: Optional[float] = Field(None, gt=0, le=1)
    confusion_mode: ConfusionMode = "uniform"
    calibration_batch: int = Field(100_000, ge=100)

    @model_validator(mode="after")
    def _one_knob(self):
        if (self.accuracy is None) == (self.target_correlation is None):
            raise ValueError("noisy_label channel needs exactly one of accuracy / target_correlation")
        return self


class EmbeddingParams(_Strict):
    channel: Literal["embedding"] = "embedding"
    dim: int = Field(32, ge=3)  # 클래스 방향 3개
    class_separation: float = Field(4.0, ge=0)
    noise_sigma: float = Field(1.0, gt=0)
    style_separation: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _room_for_style(self):
        # 지붕 형태 5 + 색상 5 방향 추가 (roof_channel.ROOF_STYLES, SHINGLE_COLORS)
        if self.style_separation > 0 and self.dim < 3 + STYLE_DIRECTIONS:
            raise ValueError(f"style_separation > 0 needs dim >= {3 + STYLE_DIRECTIONS}, got {self.dim}")
        return self


class ClusterParams(EmbeddingParams):
    channel: Literal["cluster"] = "cluster"
    k: int = Field(3, ge=2)
    max_iter: int = Field(100, ge=1)


ChannelParams = Annotated[Union[NoisyLabelParams, EmbeddingParams, ClusterParams], Field(discriminator="channel")]

_TIER_CHANNEL = {
    "cluster_labels": "cluster",
    "embedding_features": "embedding",
    "noisy_label": "noisy_label",
}


class TierSpec(_Strict):
    name: TierName
    channel_params: Optional[ChannelParams] = None
    encoding: Literal["one_hot", "ordinal"] = "one_hot"

    @model_validator(mode="after")
    def _channel_matches(self):
        wanted = _TIER_CHANNEL.get(self.name)
        got = self.channel_params.channel if self.channel_params is not None else None
        if wanted != got:
            raise ValueError(f"tier {self.name} expects channel_params of kind {wanted!r}, got {got!r}")
        return self

    @property
    def is_substitute(self) -> bool:
        return self.name in ("cluster_labels", "embedding_features", "noisy_label")


def default_tiers() -> tuple[TierSpec, ...]:
    # cluster tier은 약한 임베딩(분리도 1.5)을 군집화 → 클래스와 부분적으로만 정렬된 3개 라벨
    return (
        TierSpec(name="tabular_only"),
        TierSpec(name="cluster_labels", channel_params=ClusterParams(class_separation=1.5)),
        TierSpec(name="embedding_features", channel_params=EmbeddingParams(class_separation=3.0)),
        TierSpec(name="noisy_label", channel_params=NoisyLabelParams(target_correlation=0.8062)),
        TierSpec(name="true_label"),
        TierSpec(name="oracle"),
    )


class ForestParams(_Strict):
    n_trees: int = Field(300, ge=1)
    max_depth: Optional[int] = Field(None, ge=1)
    min_leaf: int = Field(5, ge=1)
    mtry: Optional[int] = Field(None, ge=1)  # None → ceil(p/3)
    bootstrap: bool = True
    log_target: bool = False
    seed: int = Field(0, ge=0, lt=2**64)

    def resolved_mtry(self, p: int) -> int:
        m = self.mtry if self.mtry is not None else math.ceil(p / 3)
        if not 1 <= m <= p:
            raise ConfigError(f"mtry must lie in [1, {p}], got {m}")
        return m


class SplitConfig(_Strict):
    n_train: int = Field(1000, ge=1)
    n_test: int = Field(1000, ge=1)
    split_rule: Literal["first-n", "seeded-shuffle"] = "seeded-shuffle"


class MetricOptions(_Strict):
    tie_policy: Literal["index", "average"] = "index"
    correlation: Literal["pearson", "spearman"] = "pearson"


class ExperimentConfig(_Strict):
    generation: GenerationConfig = GenerationConfig()
    split: SplitConfig = SplitConfig()
    tiers: tuple[TierSpec, ...] = Field(default_factory=default_tiers)
    forest: ForestParams = ForestParams()
    metrics: MetricOptions = MetricOptions()
    seeds: tuple[int, ...] = (0,)
    output_dir: str = OUTPUT_DIR
    write_claims: bool = True
    dump_models: bool = False

    @model_validator(mode="after")
    def _consistent(self):
        if self.split.n_train + self.split.n_test != self.generation.n_policies:
            raise ValueError(
                f"n_train + n_test ({self.split.n_train} + {self.split.n_test}) "
                f"must equal generation.n_policies ({self.generation.n_policies})"
            )
        names = [t.name for t in self.tiers]
        if len(set(names)) != len(names):
            raise ValueError(f"tier names must be unique, got {names}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if any(not 0 <= s < 2**64 for s in self.seeds):
            raise ValueError("seeds must be 64-bit unsigned integers")
        return self

    def for_seed(self, seed: int) -> GenerationConfig:
        return self.generation.model_copy(update={"master_seed": int(seed)})


# =========================
# 로딩 / 지문
# =========================
def config_fingerprint(model: BaseModel) -> str:
    # 출력 위치는 실험 내용이 아님
    exclude = {"output_dir"} if isinstance(model, ExperimentConfig) else None
    payload = json.dumps(model.model_dump(mode="json", exclude=exclude), sort_keys=True, separators=(",", ":"))
    return hashlib.sha1(payload.encode("utf-8")).hexdigest()[:12]


def load_experiment_config(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    """YAML 설정을 읽어 ExperimentConfig로. overrides는 최상위 키를 덮어씀(None은 무시)."""
    path = Path(path or CONFIG_PATH)
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must contain a mapping at top level")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}:\n{e}") from e
