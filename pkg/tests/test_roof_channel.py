from __future__ import annotations

import json

import numpy as np
import pytest

from src.distributions import SeedSpec, make_rng
from src.errors import CalibrationError, ParameterError, UsageError
from src.metrics import aligned_correlation, ordinal_correlation
from src.policy_gen import RoofHealth, roof_codes
from src.roof_channel import (
    DESCRIPTOR_SLOTS,
    ROOF_STYLES,
    SHINGLE_COLORS,
    ChannelOutput,
    DescriptorTable,
    calibrate_labeler,
    channel_correlation,
    channel_frame,
    cluster_channel,
    corrupt_labels,
    decode_prompt,
    embedding_channel,
    generate_prompts,
    kmeans,
    label_codes,
    noisy_label_channel,
    true_label_channel,
    write_prompt_manifest,
)

PROPS = (0.55, 0.25, 0.20)


def _fresh_correlation(accuracy: float, mode: str = "uniform", n: int = 100_000, seed: int = 99) -> float:
    rng = make_rng(SeedSpec(seed, "fresh"))
    truth = rng.choice(3, size=n, p=PROPS)
    labels = corrupt_labels(truth, accuracy, mode, rng.random(n), rng.random(n))
    return ordinal_correlation(truth, labels)


# =========================
# 프롬프트
# =========================
def test_prompts_carry_all_slots(default_policies):
    prompts = generate_prompts(default_policies, seed=SeedSpec(0, "prompt"))
    assert len(prompts) == 2000
    table = DescriptorTable()
    for p in prompts:
        assert p.roof_style in ROOF_STYLES and p.shingle_color in SHINGLE_COLORS
        for slot, text in zip(DESCRIPTOR_SLOTS, (p.surface_descriptor, p.edge_descriptor, p.extra_descriptor)):
            assert text in getattr(table, slot)[p.roof_health.label]
            assert text in p.prompt_text
        assert p.prompt_text.startswith("Realistic straight-down aerial photo")
        assert decode_prompt(p) == p.roof_health


def test_good_roof_descriptors_appear(default_policies):
    prompts = generate_prompts(default_policies, seed=SeedSpec(0, "prompt"))
    good = [p.prompt_text for p in prompts if p.roof_health is RoofHealth.GOOD]
    assert any("even rows of intact shingles" in t for t in good)
    assert any("well-sealed ridge lines" in t for t in good)


def test_manifest_is_deterministic_and_public_hides_label(default_policies, tmp_path):
    seed = SeedSpec(3, "prompt")
    a = write_prompt_manifest(generate_prompts(default_policies, seed=seed), tmp_path / "a.jsonl")
    b = write_prompt_manifest(generate_prompts(default_policies, seed=seed), tmp_path / "b.jsonl")
    with open(a, "rb") as fa, open(b, "rb") as fb:
        assert fa.read() == fb.read()
    with open(a, encoding="utf-8") as f:
        rows = [json.loads(line) for line in f]
    assert len(rows) == 2000
    assert set(rows[0]) == {"policy_id", "roof_style", "shingle_color", "surface", "edge", "extra", "prompt"}

    private = write_prompt_manifest(generate_prompts(default_policies, seed=seed), tmp_path / "p.jsonl", private=True)
    with open(private, encoding="utf-8") as f:
        first = json.loads(f.readline())
    assert first["roof_health"] in ("Good", "Fair", "Bad")


def test_descriptor_table_validation():
    with pytest.raises(ValueError):
        DescriptorTable(surface={"Good": ("a",), "Fair": (), "Bad": ("c",)})
    with pytest.raises(ValueError):
        DescriptorTable(surface={"Good": ("same",), "Fair": ("same",), "Bad": ("c",)})


# =========================
# 라벨 채널
# =========================
def test_true_label_channel(default_policies, make_roof_frame):
    outputs = true_label_channel(default_policies)
    assert channel_correlation(default_policies, outputs) == pytest.approx(1.0)
    assert true_label_channel(make_roof_frame([])) == []


def test_channel_output_validation():
    with pytest.raises(ParameterError):
        ChannelOutput("POL-000001", "vlm", "h", predicted_label=RoofHealth.GOOD)
    with pytest.raises(ParameterError):
        ChannelOutput("POL-000001", "true_label", "h")


def test_perfect_labeler_equals_truth(default_policies):
    noisy = noisy_label_channel(default_policies, 1.0, seed=SeedSpec(0, "n"))
    np.testing.assert_array_equal(label_codes(noisy), label_codes(true_label_channel(default_policies)))


def test_noisy_channel_is_deterministic(default_policies):
    a = noisy_label_channel(default_policies, 0.7, seed=SeedSpec(1, "n"))
    b = noisy_label_channel(default_policies, 0.7, seed=SeedSpec(1, "n"))
    np.testing.assert_array_equal(label_codes(a), label_codes(b))
    assert a[0].channel_params_hash == b[0].channel_params_hash


def test_chance_labeler_is_uncorrelated():
    n = 100_000
    assert abs(_fresh_correlation(1 / 3, n=n)) <= 3 / np.sqrt(n)


def test_accuracy_out_of_range(default_policies):
    with pytest.raises(ParameterError):
        noisy_label_channel(default_policies, 0.2)
    with pytest.raises(ParameterError):
        noisy_label_channel(default_policies, 1.01)


@pytest.mark.parametrize("target", [0.40, 0.81, 0.8062])
def test_calibration_hits_target(target):
    accuracy = calibrate_labeler(target, "uniform", PROPS, seed=SeedSpec(0, "calibration"))
    assert 1 / 3 < accuracy < 1
    assert abs(_fresh_correlation(accuracy) - target) <= 0.02


def test_calibration_adjacent_mode():
    accuracy = calibrate_labeler(0.6, "adjacent", PROPS, seed=SeedSpec(0, "calibration"))
    assert abs(_fresh_correlation(accuracy, "adjacent") - 0.6) <= 0.02


def test_calibration_edges():
    assert calibrate_labeler(1.0, "uniform", PROPS) == 1.0
    with pytest.raises(CalibrationError) as err:
        calibrate_labeler(0.01, "adjacent", PROPS)
    lo, hi = err.value.achievable
    assert 0.01 < lo < hi <= 1.0
    with pytest.raises(ParameterError):
        calibrate_labeler(0.0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_labeler_correlation_monotone_in_accuracy(seed):
    grid = np.linspace(1 / 3, 1.0, 10)
    corr = [_fresh_correlation(a, seed=seed) for a in grid]
    assert all(b >= a for a, b in zip(corr, corr[1:])), corr
    assert corr[-1] == pytest.approx(1.0)


# =========================
# 임베딩 / 군집
# =========================
def test_embedding_shape_and_dim_check(default_policies):
    outputs = embedding_channel(default_policies, dim=16, seed=SeedSpec(0, "e"))
    assert outputs[0].embedding.shape == (16,)
    assert list(channel_frame(outputs[:2]).columns)[:2] == ["PolicyID", "Emb00"]
    with pytest.raises(ParameterError):
        embedding_channel(default_policies, dim=1)


def test_default_embedding_is_linearly_separable(make_roof_frame):
    codes = make_rng(SeedSpec(0, "codes")).choice(3, size=10_000, p=PROPS)
    frame = make_roof_frame(codes)
    emb = np.vstack([o.embedding for o in embedding_channel(frame, seed=SeedSpec(0, "e"))])
    half = codes.size // 2
    means = np.vstack([emb[:half][codes[:half] == c].mean(axis=0) for c in range(3)])
    dist = ((emb[half:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    assert np.mean(dist.argmin(axis=1) == codes[half:]) > 0.95


def test_zero_separation_carries_no_signal(make_roof_frame):
    codes = make_rng(SeedSpec(0, "codes")).choice(3, size=6000, p=PROPS)
    emb = np.vstack([o.embedding for o in embedding_channel(make_roof_frame(codes), class_separation=0, seed=SeedSpec(1, "e"))])
    means = np.vstack([emb[codes == c].mean(axis=0) for c in range(3)])
    assert np.abs(means).max() < 0.15


def test_style_component_needs_prompts(default_policies):
    with pytest.raises(UsageError):
        embedding_channel(default_policies, style_separation=1.0)
    prompts = generate_prompts(default_policies, seed=SeedSpec(0, "prompt"))
    plain = embedding_channel(default_policies, seed=SeedSpec(0, "e"))
    styled = embedding_channel(default_policies, seed=SeedSpec(0, "e"), style_separation=1.0, prompts=prompts)
    assert not np.allclose(plain[0].embedding, styled[0].embedding)


def test_kmeans_separates_far_points():
    points = np.eye(3) * 100.0
    _, labels = kmeans(points, 3, make_rng(SeedSpec(0, "k")))
    assert sorted(labels.tolist()) == [0, 1, 2]


def test_tight_clusters_are_recovered(make_roof_frame):
    codes = make_rng(SeedSpec(2, "codes")).choice(3, size=600, p=PROPS)
    frame = make_roof_frame(codes)
    emb = embedding_channel(frame, dim=8, class_separation=1.0, noise_sigma=1e-6, seed=SeedSpec(2, "e"))
    clusters = cluster_channel(emb, 3, SeedSpec(2, "k"))
    r, _ = aligned_correlation(roof_codes(frame), [o.cluster_id for o in clusters])
    assert r == pytest.approx(1.0)


def test_duplicated_points_keep_partition():
    rng = make_rng(SeedSpec(3, "pts"))
    points = np.vstack([rng.normal(c * 10.0, 1.0, size=(50, 4)) for c in range(3)])
    _, once = kmeans(points, 3, make_rng(SeedSpec(3, "k")))
    _, twice = kmeans(np.vstack([points, points]), 3, make_rng(SeedSpec(3, "k")))
    pairs = set(zip(once.tolist(), twice[: len(points)].tolist()))
    assert len(pairs) == 3


def test_default_cluster_alignment(make_roof_frame):
    codes = make_rng(SeedSpec(4, "codes")).choice(3, size=10_000, p=PROPS)
    frame = make_roof_frame(codes)
    clusters = cluster_channel(embedding_channel(frame, seed=SeedSpec(4, "e")), 3, SeedSpec(4, "k"))
    aligned, _ = aligned_correlation(codes, [o.cluster_id for o in clusters])
    assert aligned >= 0.8
    raw = channel_correlation(frame, clusters)
    assert -1.0 <= raw <= aligned


def test_cluster_channel_errors(default_policies):
    with pytest.raises(UsageError):
        cluster_channel(true_label_channel(default_policies))
    emb = embedding_channel(default_policies.head(2), seed=SeedSpec(0, "e"))
    with pytest.raises(UsageError):
        cluster_channel(emb, 3)
