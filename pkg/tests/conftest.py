from __future__ import annotations

import pandas as pd
import pytest

from src.config import (
    ClusterParams,
    EmbeddingParams,
    ExperimentConfig,
    ForestParams,
    GenerationConfig,
    NoisyLabelParams,
    SplitConfig,
    TierSpec,
)
from src.policy_gen import ROOF_LABELS, assign_roof_health, generate_policies


@pytest.fixture(scope="session")
def default_policies() -> pd.DataFrame:
    """기본 설정 2000건 (RoofHealth 포함, 손해 제외)."""
    config = GenerationConfig(master_seed=0)
    return assign_roof_health(generate_policies(config), config.thresholds)


def roof_frame(codes) -> pd.DataFrame:
    codes = list(codes)
    return pd.DataFrame(
        {
            "PolicyID": [f"POL-{i + 1:06d}" for i in range(len(codes))],
            "RoofHealth": pd.Categorical.from_codes(codes, categories=list(ROOF_LABELS), ordered=True),
        }
    )


@pytest.fixture
def small_config(tmp_path) -> ExperimentConfig:
    return ExperimentConfig(
        generation=GenerationConfig(n_policies=200),
        split=SplitConfig(n_train=100, n_test=100),
        tiers=(
            TierSpec(name="tabular_only"),
            TierSpec(name="cluster_labels", channel_params=ClusterParams(class_separation=1.5, dim=8)),
            TierSpec(name="embedding_features", channel_params=EmbeddingParams(class_separation=3.0, dim=8)),
            TierSpec(name="noisy_label", channel_params=NoisyLabelParams(target_correlation=0.8062, calibration_batch=5000)),
            TierSpec(name="true_label"),
            TierSpec(name="oracle"),
        ),
        forest=ForestParams(n_trees=10),
        seeds=(0,),
        output_dir=str(tmp_path / "out"),
    )


@pytest.fixture
def make_roof_frame():
    return roof_frame
