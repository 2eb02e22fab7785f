# src/policy_gen.py
"""
정책 테이블 생성: 공개 특성 6개 + 숨은 잠재 점수 S_p + RoofHealth.

RoofHealth 분위 규칙: 배치 전체 점수의 nearest-rank 분위(순위 ceil(q*n/100)),
경계값은 아래쪽 클래스에 포함 (S <= q55 → Good, S <= q80 → Fair, 나머지 Bad).

참고: 120*Beta(4,3)의 중앙값은 약 69.5년. 문서 일부의 "약 40년 중앙값" 표기와 다르지만 식을 그대로 따름.
"""
from __future__ import annotations

import math
from enum import IntEnum
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field

from .config import GenerationConfig, ScoreCoeffs, Thresholds, config_fingerprint
from .distributions import PRNG_ID, draw, make_rng, stream
from .errors import DataValidationError, UsageError
from .io_utils import read_csv, utc_now_iso, write_csv


class RoofHealth(IntEnum):
    GOOD = 0
    FAIR = 1
    BAD = 2

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def from_label(cls, label: str) -> "RoofHealth":
        try:
            return cls[label.strip().upper()]
        except KeyError:
            raise DataValidationError(f"unknown RoofHealth label {label!r}") from None


ROOF_LABELS = tuple(rh.label for rh in RoofHealth)  # ("Good", "Fair", "Bad")

RELEASED_COLUMNS = ("PolicyID", "HouseValue", "HouseAge", "WallType", "AreaRisk", "CreditScore")
HIDDEN_COLUMNS = ("RoofHealth", "LatentScore", "LatentNoise", "NextYearLoss")
FULL_COLUMNS = RELEASED_COLUMNS + ("RoofHealth", "LatentScore", "NextYearLoss")

# 고정 포맷: 특성 소수 6자리, 금액 소수 2자리
_FORMATS = {
    "HouseValue": "{:.2f}",
    "HouseAge": "{:.6f}",
    "AreaRisk": "{:.6f}",
    "LatentScore": "{:.6f}",
    "NextYearLoss": "{:.2f}",
}


class PolicyRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    policy_id: str = Field(pattern=r"^POL-\d{6,}$")
    house_value: float = Field(gt=0)
    house_age: float = Field(ge=0, le=120)
    wall_type: str = Field(pattern=r"^(Wood|Brick)$")
    area_risk: float = Field(ge=0, le=1)
    credit_score: int = Field(ge=300, le=850)
    latent_score: Optional[float] = None
    latent_noise: Optional[float] = None
    roof_health: Optional[RoofHealth] = None
    next_year_loss: Optional[float] = Field(None, ge=0)


def policy_id(index: int) -> str:
    return f"POL-{index:06d}"


def latent_score(house_age, area_risk, credit_score, noise, coeffs: ScoreCoeffs):
    """S_p = a*age + b*risk + c*(credit/850) + eps. 스칼라/배열 모두 허용."""
    return (
        coeffs.age_coeff * np.asarray(house_age, dtype=float)
        + coeffs.risk_coeff * np.asarray(area_risk, dtype=float)
        + coeffs.credit_coeff * (np.asarray(credit_score, dtype=float) / coeffs.credit_denominator)
        + np.asarray(noise, dtype=float)
    )


def _draw_policy(config: GenerationConfig, index: int) -> tuple:
    # 정책별 서브스트림, 추출 순서 고정: value, age, wall, risk, credit, noise
    rng = make_rng(stream(config.master_seed, "policy", index))
    value = draw(config.value_params, rng, 1)[0]
    age = config.age_scale * draw(config.age_beta_params, rng, 1)[0]
    wall = draw(config.wall_probs, rng, 1)[0]
    risk = draw(config.risk_beta_params, rng, 1)[0]
    credit = int(draw(config.fico_params, rng, 1)[0])
    noise = config.score_coeffs.noise_sigma * rng.standard_normal()
    return policy_id(index), float(value), float(age), str(wall), float(risk), credit, float(noise)


def _draw_chunk(config: GenerationConfig, indices: range) -> list[tuple]:
    return [_draw_policy(config, i) for i in indices]


def generate_policies(config: GenerationConfig, n_jobs: int = 1) -> pd.DataFrame:
    """정책 테이블(손해 제외) 생성. 결과는 n_jobs와 무관."""
    n = config.n_policies
    if n_jobs == 1:
        rows = _draw_chunk(config, range(1, n + 1))
    else:
        chunk = max(1, math.ceil(n / (4 * abs(n_jobs))))
        parts = Parallel(n_jobs=n_jobs)(
            delayed(_draw_chunk)(config, range(start, min(start + chunk, n + 1)))
            for start in range(1, n + 1, chunk)
        )
        rows = [row for part in parts for row in part]

    frame = pd.DataFrame(
        rows,
        columns=["PolicyID", "HouseValue", "HouseAge", "WallType", "AreaRisk", "CreditScore", "LatentNoise"],
    )
    frame["CreditScore"] = frame["CreditScore"].astype(np.int64)
    frame["LatentScore"] = latent_score(
        frame["HouseAge"], frame["AreaRisk"], frame["CreditScore"], frame["LatentNoise"], config.score_coeffs
    )
    return frame


def nearest_rank_percentile(values, q: float) -> float:
    """q분위 = 정렬값의 ceil(q*n/100)번째 (1-based)."""
    s = np.sort(np.asarray(values, dtype=float))
    if s.size == 0:
        raise UsageError("percentile of an empty batch is undefined")
    rank = math.ceil(Fraction(str(q)) * s.size / 100)
    return float(s[min(max(rank, 1), s.size) - 1])


def assign_roof_health(policies: pd.DataFrame, thresholds: Thresholds) -> pd.DataFrame:
    if len(policies) == 0:
        raise UsageError("cannot assign RoofHealth to an empty batch")
    scores = policies["LatentScore"].to_numpy(dtype=float)
    q_fair = nearest_rank_percentile(scores, thresholds.fair_percentile)
    q_bad = nearest_rank_percentile(scores, thresholds.bad_percentile)
    codes = np.where(scores <= q_fair, RoofHealth.GOOD, np.where(scores <= q_bad, RoofHealth.FAIR, RoofHealth.BAD))
    out = policies.copy()
    out["RoofHealth"] = pd.Categorical.from_codes(codes.astype(np.int8), categories=list(ROOF_LABELS), ordered=True)
    return out


def roof_codes(policies: pd.DataFrame) -> np.ndarray:
    rh = policies["RoofHealth"]
    if not isinstance(rh.dtype, pd.CategoricalDtype):
        rh = pd.Categorical(rh, categories=list(ROOF_LABELS), ordered=True)
        codes = np.asarray(rh.codes)
    else:
        codes = rh.cat.codes.to_numpy()
    if np.any(codes < 0):
        raise UsageError("RoofHealth missing or unknown for some policies")
    return codes.astype(np.int64)


def to_records(policies: pd.DataFrame) -> list[PolicyRecord]:
    out = []
    for row in policies.itertuples(index=False):
        d = row._asdict()
        rh = d.get("RoofHealth")
        out.append(
            PolicyRecord(
                policy_id=d["PolicyID"],
                house_value=d["HouseValue"],
                house_age=d["HouseAge"],
                wall_type=d["WallType"],
                area_risk=d["AreaRisk"],
                credit_score=int(d["CreditScore"]),
                latent_score=d.get("LatentScore"),
                latent_noise=d.get("LatentNoise"),
                roof_health=RoofHealth.from_label(rh) if isinstance(rh, str) else None,
                next_year_loss=d.get("NextYearLoss"),
            )
        )
    return out


def from_records(records: list[PolicyRecord]) -> pd.DataFrame:
    frame = pd.DataFrame(
        {
            "PolicyID": [r.policy_id for r in records],
            "HouseValue": [r.house_value for r in records],
            "HouseAge": [r.house_age for r in records],
            "WallType": [r.wall_type for r in records],
            "AreaRisk": [r.area_risk for r in records],
            "CreditScore": np.array([r.credit_score for r in records], dtype=np.int64),
        }
    )
    if records and all(r.latent_score is not None for r in records):
        frame["LatentScore"] = [r.latent_score for r in records]
    if records and all(r.roof_health is not None for r in records):
        frame["RoofHealth"] = pd.Categorical.from_codes(
            [int(r.roof_health) for r in records], categories=list(ROOF_LABELS), ordered=True
        )
    if records and all(r.next_year_loss is not None for r in records):
        frame["NextYearLoss"] = [r.next_year_loss for r in records]
    return frame


# =========================
# 내보내기 / 읽기
# =========================
def format_table(policies: pd.DataFrame, columns) -> pd.DataFrame:
    out = pd.DataFrame(index=range(len(policies)))
    for col in columns:
        values = policies[col].tolist()
        fmt = _FORMATS.get(col)
        if fmt:
            out[col] = [fmt.format(float(v)) for v in values]
        elif col == "CreditScore":
            out[col] = [str(int(v)) for v in values]
        else:
            out[col] = [str(v) for v in values]
    return out


def export_policy_table(policies: pd.DataFrame, destination: str | Path, visibility: str = "released") -> str:
    """
    released: PolicyID + 공개 특성 6개만.
    full: + RoofHealth, LatentScore, (있으면) NextYearLoss.
    """
    if visibility == "released":
        columns = RELEASED_COLUMNS
    elif visibility == "full":
        required = ("RoofHealth", "LatentScore")
        missing = [c for c in required if c not in policies.columns]
        if missing:
            raise UsageError(f"full export needs columns {missing}")
        columns = tuple(c for c in FULL_COLUMNS if c in policies.columns)
    else:
        raise UsageError(f"visibility must be 'released' or 'full', got {visibility!r}")
    missing = [c for c in RELEASED_COLUMNS if c not in policies.columns]
    if missing:
        raise UsageError(f"policy table lacks columns {missing}")
    return write_csv(format_table(policies, columns), destination)


def assert_no_hidden_columns(columns, source: str = "table") -> None:
    leaked = [c for c in columns if c in HIDDEN_COLUMNS]
    if leaked:
        raise DataValidationError(f"hidden columns present in {source}", leaked)


def read_policy_table(path: str | Path) -> pd.DataFrame:
    raw = read_csv(path)
    missing = [c for c in RELEASED_COLUMNS if c not in raw.columns]
    if missing:
        raise DataValidationError(f"{path} is missing policy columns", missing)
    frame = pd.DataFrame({"PolicyID": raw["PolicyID"], "WallType": raw["WallType"]})
    try:
        for col in ("HouseValue", "HouseAge", "AreaRisk"):
            frame[col] = raw[col].astype(float)
        frame["CreditScore"] = raw["CreditScore"].astype(np.int64)
        if "LatentScore" in raw.columns:
            frame["LatentScore"] = raw["LatentScore"].astype(float)
        if "NextYearLoss" in raw.columns:
            frame["NextYearLoss"] = raw["NextYearLoss"].astype(float)
    except ValueError as e:
        raise DataValidationError(f"{path} has non-numeric values: {e}") from e
    if "RoofHealth" in raw.columns:
        codes = [int(RoofHealth.from_label(v)) for v in raw["RoofHealth"]]
        frame["RoofHealth"] = pd.Categorical.from_codes(codes, categories=list(ROOF_LABELS), ordered=True)
    dup = frame["PolicyID"][frame["PolicyID"].duplicated()].tolist()
    if dup:
        raise DataValidationError(f"{path} has duplicate policy ids", dup)
    bad_wall = sorted(set(frame["WallType"]) - {"Wood", "Brick"})
    if bad_wall:
        raise DataValidationError(f"{path} has unknown WallType values", bad_wall)
    return frame[[c for c in list(RELEASED_COLUMNS) + list(HIDDEN_COLUMNS) if c in frame.columns]]


def dataset_manifest(config: GenerationConfig, **extra) -> dict:
    return {
        "config_fingerprint": config_fingerprint(config),
        "master_seed": config.master_seed,
        "n_policies": config.n_policies,
        "prng": PRNG_ID,
        "generated_at": utc_now_iso(),
        **extra,
    }
