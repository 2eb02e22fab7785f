# src/loss_sim.py
"""
다음 해 손해 Y_p 시뮬레이션 (빈도-심도 복합 모형) + 오라클 기대손해.

  lambda = exp(b0 + b1*ln(value/250k) + b2*age + b3*risk + alpha[rh]),  N ~ NB(r, mean=lambda)
  mu     = c0 + c1*1(Wood) + c2*risk + beta[rh],                         Z ~ Gamma(k, exp(mu)/k)
  Y      = sum Z  (N=0 이면 0)

빈도/심도는 정책별로 서로 다른 서브스트림 → gamma_k를 바꿔도 청구 건수는 그대로.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .config import FrequencyCoeffs, SeverityCoeffs
from .distributions import gamma_poisson, make_rng, stream
from .errors import ParameterError, UsageError
from .io_utils import write_jsonl
from .policy_gen import PolicyRecord, roof_codes


@dataclass(frozen=True)
class ClaimOutcome:
    policy_id: str
    lam: float
    claim_count: int
    mu: float
    claim_losses: tuple[float, ...]
    total_loss: float


def _frequency_exponent(value, age, risk, rh_code, coeffs: FrequencyCoeffs):
    value = np.asarray(value, dtype=float)
    if np.any(value <= 0):
        raise ParameterError("domain error: house_value must be positive for ln(value/value_ref)")
    alpha = np.asarray(coeffs.alpha_rh, dtype=float)[np.asarray(rh_code, dtype=np.int64)]
    return (
        coeffs.intercept
        + coeffs.log_value_coeff * np.log(value / coeffs.value_ref)
        + coeffs.age_coeff * np.asarray(age, dtype=float)
        + coeffs.risk_coeff * np.asarray(risk, dtype=float)
        + alpha
    )


def _severity_location(is_wood, risk, rh_code, coeffs: SeverityCoeffs):
    beta = np.asarray(coeffs.beta_rh, dtype=float)[np.asarray(rh_code, dtype=np.int64)]
    return (
        coeffs.intercept
        + coeffs.wood_coeff * np.asarray(is_wood, dtype=float)
        + coeffs.risk_coeff * np.asarray(risk, dtype=float)
        + beta
    )


def _require_roof(record: PolicyRecord) -> int:
    if record.roof_health is None:
        raise UsageError(f"{record.policy_id}: roof_health must be assigned")
    return int(record.roof_health)


def frequency_rate(record: PolicyRecord, coeffs: FrequencyCoeffs) -> float:
    rh = _require_roof(record)
    return float(np.exp(_frequency_exponent(record.house_value, record.house_age, record.area_risk, rh, coeffs)))


def severity_location(record: PolicyRecord, coeffs: SeverityCoeffs) -> float:
    rh = _require_roof(record)
    return float(_severity_location(record.wall_type == "Wood", record.area_risk, rh, coeffs))


def frequency_rates(policies: pd.DataFrame, coeffs: FrequencyCoeffs) -> np.ndarray:
    return np.exp(
        _frequency_exponent(
            policies["HouseValue"].to_numpy(dtype=float),
            policies["HouseAge"].to_numpy(dtype=float),
            policies["AreaRisk"].to_numpy(dtype=float),
            roof_codes(policies),
            coeffs,
        )
    )


def severity_locations(policies: pd.DataFrame, coeffs: SeverityCoeffs) -> np.ndarray:
    return _severity_location(
        (policies["WallType"] == "Wood").to_numpy(),
        policies["AreaRisk"].to_numpy(dtype=float),
        roof_codes(policies),
        coeffs,
    )


def _simulate_chunk(ids, lams, mus, r: float, k: float, master_seed: int) -> list[ClaimOutcome]:
    out = []
    for pid, lam, mu in zip(ids, lams, mus):
        n = int(gamma_poisson(make_rng(stream(master_seed, "claims-count", pid)), r, np.array([lam]))[0])
        if n:
            z = make_rng(stream(master_seed, "claims-severity", pid)).gamma(k, math.exp(mu) / k, size=n)
            losses = tuple(float(v) for v in z)
        else:
            losses = ()
        out.append(ClaimOutcome(pid, float(lam), n, float(mu), losses, math.fsum(losses)))
    return out


def simulate_losses(
    policies: pd.DataFrame,
    frequency: FrequencyCoeffs,
    severity: SeverityCoeffs,
    master_seed: int,
    n_jobs: int = 1,
) -> list[ClaimOutcome]:
    ids = policies["PolicyID"].tolist()
    lams = frequency_rates(policies, frequency)
    mus = severity_locations(policies, severity)
    r, k = frequency.nb_r, severity.gamma_k
    if n_jobs == 1 or len(ids) < 2:
        return _simulate_chunk(ids, lams, mus, r, k, master_seed)
    chunk = max(1, math.ceil(len(ids) / (4 * abs(n_jobs))))
    parts = Parallel(n_jobs=n_jobs)(
        delayed(_simulate_chunk)(ids[i : i + chunk], lams[i : i + chunk], mus[i : i + chunk], r, k, master_seed)
        for i in range(0, len(ids), chunk)
    )
    return [o for part in parts for o in part]


def attach_losses(policies: pd.DataFrame, outcomes: list[ClaimOutcome]) -> pd.DataFrame:
    by_id = {o.policy_id: o.total_loss for o in outcomes}
    missing = [pid for pid in policies["PolicyID"] if pid not in by_id]
    if missing:
        raise UsageError(f"no simulated outcome for {len(missing)} policies, e.g. {missing[:3]}")
    out = policies.copy()
    out["NextYearLoss"] = [by_id[pid] for pid in policies["PolicyID"]]
    return out


def oracle_predict(policies: pd.DataFrame, frequency: FrequencyCoeffs, severity: SeverityCoeffs) -> pd.DataFrame:
    """ŷ = lambda * exp(mu). 난수 없음."""
    expected = frequency_rates(policies, frequency) * np.exp(severity_locations(policies, severity))
    return pd.DataFrame({"PolicyID": policies["PolicyID"].to_numpy(), "Prediction": expected})


def write_claims_jsonl(outcomes: list[ClaimOutcome], path: str | Path) -> str:
    rows = (
        {"policy_id": o.policy_id, "claim_index": j, "loss": loss}
        for o in outcomes
        for j, loss in enumerate(o.claim_losses, start=1)
    )
    return write_jsonl(path, rows)
