from __future__ import annotations

import math

import numpy as np
import pandas as pd
import pytest

from src.config import FrequencyCoeffs, SeverityCoeffs
from src.errors import ParameterError, UsageError
from src.io_utils import read_jsonl
from src.loss_sim import (
    attach_losses,
    frequency_rate,
    frequency_rates,
    oracle_predict,
    severity_location,
    simulate_losses,
    write_claims_jsonl,
)
from src.policy_gen import ROOF_LABELS, PolicyRecord, RoofHealth

FREQ = FrequencyCoeffs()
SEV = SeverityCoeffs()


def _record(value=250_000.0, age=0.0, risk=0.0, wall="Brick", roof=RoofHealth.GOOD) -> PolicyRecord:
    return PolicyRecord(
        policy_id="POL-000001", house_value=value, house_age=age, wall_type=wall,
        area_risk=risk, credit_score=700, roof_health=roof,
    )


def _frame(n, value=250_000.0, age=0.0, risk=0.0, wall="Brick", roof="Good") -> pd.DataFrame:
    return pd.DataFrame(
        {
            "PolicyID": [f"POL-{i:06d}" for i in range(1, n + 1)],
            "HouseValue": value,
            "HouseAge": age,
            "WallType": wall,
            "AreaRisk": risk,
            "CreditScore": 700,
            "RoofHealth": pd.Categorical([roof] * n, categories=list(ROOF_LABELS), ordered=True),
        }
    )


def test_frequency_examples():
    assert frequency_rate(_record(), FREQ) == pytest.approx(math.exp(-3.0))
    assert frequency_rate(_record(roof=RoofHealth.BAD), FREQ) == pytest.approx(math.exp(-0.6))
    fair = _record(value=250_000.0 * math.e, age=100, risk=1.0, roof=RoofHealth.FAIR)
    assert frequency_rate(fair, FREQ) == pytest.approx(math.exp(-0.72))
    assert frequency_rate(fair, FREQ) == pytest.approx(0.48675, abs=1e-5)


def test_severity_examples():
    assert severity_location(_record(), SEV) == pytest.approx(7.0)
    assert severity_location(_record(wall="Wood", risk=1.0, roof=RoofHealth.BAD), SEV) == pytest.approx(9.04)


def test_nonpositive_value_is_domain_error():
    frame = _frame(2)
    frame.loc[1, "HouseValue"] = 0.0
    with pytest.raises(ParameterError, match="domain error"):
        frequency_rates(frame, FREQ)


def test_unassigned_roof_rejected():
    record = _record().model_copy(update={"roof_health": None})
    with pytest.raises(UsageError):
        frequency_rate(record, FREQ)


def test_monotone_in_risk_and_roof():
    lams = [frequency_rate(_record(risk=r), FREQ) for r in (0.0, 0.5, 1.0)]
    mus = [severity_location(_record(risk=r), SEV) for r in (0.0, 0.5, 1.0)]
    assert lams == sorted(lams) and mus == sorted(mus)
    by_roof = [_record(roof=rh) for rh in RoofHealth]
    assert np.all(np.diff([frequency_rate(r, FREQ) for r in by_roof]) > 0)
    assert np.all(np.diff([severity_location(r, SEV) for r in by_roof]) > 0)


def test_zero_frequency_means_zero_losses():
    outcomes = simulate_losses(_frame(500), FREQ.model_copy(update={"intercept": -50.0}), SEV, master_seed=1)
    assert all(o.claim_count == 0 and o.total_loss == 0.0 for o in outcomes)


def test_compound_mean_matches_expected_loss():
    n = 50_000
    outcomes = simulate_losses(_frame(n), FREQ, SEV, master_seed=2)
    y = np.array([o.total_loss for o in outcomes])
    lam, mu = math.exp(-3.0), 7.0
    var = lam * math.exp(2 * mu) * (1 / SEV.gamma_k + 1 + lam / FREQ.nb_r)
    assert abs(y.mean() - lam * math.exp(mu)) <= 3 * math.sqrt(var / n)


def test_outcome_consistency_and_determinism():
    frame = _frame(300, roof="Bad")
    a = simulate_losses(frame, FREQ, SEV, master_seed=4)
    assert a == simulate_losses(frame, FREQ, SEV, master_seed=4)
    assert a == simulate_losses(frame, FREQ, SEV, master_seed=4, n_jobs=2)
    for o in a:
        assert len(o.claim_losses) == o.claim_count
        assert o.total_loss == pytest.approx(sum(o.claim_losses))
        assert all(z > 0 for z in o.claim_losses)


def test_severity_shape_does_not_move_counts():
    frame = _frame(300, roof="Bad")
    a = simulate_losses(frame, FREQ, SEV, master_seed=5)
    b = simulate_losses(frame, FREQ, SEV.model_copy(update={"gamma_k": 7.0}), master_seed=5)
    assert [o.claim_count for o in a] == [o.claim_count for o in b]


def test_oracle_examples():
    frame = pd.concat([_frame(1), _frame(1, roof="Bad")], ignore_index=True)
    pred = oracle_predict(frame, FREQ, SEV)["Prediction"].to_numpy()
    assert pred[0] == pytest.approx(54.598, abs=1e-3)
    assert pred[1] / pred[0] == pytest.approx(math.exp(4.4))


def test_attach_losses_and_claims_file(tmp_path):
    frame = _frame(50, roof="Bad")
    outcomes = simulate_losses(frame, FREQ, SEV, master_seed=6)
    with_loss = attach_losses(frame, outcomes)
    assert "NextYearLoss" not in frame.columns
    assert (with_loss["NextYearLoss"] >= 0).all()
    with pytest.raises(UsageError):
        attach_losses(frame, outcomes[:-1])

    rows = read_jsonl(write_claims_jsonl(outcomes, tmp_path / "claims.jsonl"))
    assert len(rows) == sum(o.claim_count for o in outcomes)
    assert all(set(r) == {"policy_id", "claim_index", "loss"} for r in rows)


COMPOUND_CELLS = [
    dict(),
    dict(roof="Bad"),
    dict(value=250_000.0 * math.e, age=100.0, risk=1.0, roof="Fair"),
    dict(wall="Wood", risk=1.0, roof="Bad"),
]


@pytest.mark.slow
@pytest.mark.parametrize("cell", range(len(COMPOUND_CELLS)))
def test_compound_grid_mean_and_zero_mass(cell):
    n = 100_000
    frame = _frame(n, **COMPOUND_CELLS[cell])
    outcomes = simulate_losses(frame, FREQ, SEV, master_seed=100 + cell)
    y = np.array([o.total_loss for o in outcomes])
    lam = float(frequency_rates(frame.iloc[:1], FREQ)[0])
    expected = float(oracle_predict(frame.iloc[:1], FREQ, SEV)["Prediction"].iloc[0])
    mu = math.log(expected / lam)

    var = lam * math.exp(2 * mu) * (1 / SEV.gamma_k + 1 + lam / FREQ.nb_r)
    assert abs(y.mean() - expected) <= 3 * math.sqrt(var / n)

    # 심도 > 0 이므로 Y = 0 ⇔ 청구 0건
    p0 = (FREQ.nb_r / (FREQ.nb_r + lam)) ** FREQ.nb_r
    assert abs(np.mean(y == 0) - p0) <= 3 * math.sqrt(p0 * (1 - p0) / n)
