# src/harness.py
from __future__ import annotations

import io
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict
from rich import print
from rich.console import Console
from rich.table import Table
from tqdm import tqdm

from .config import N_JOBS, TIER_ORDER, ExperimentConfig, MetricOptions, TierSpec, config_fingerprint
from .distributions import SeedSpec, make_rng
from .errors import IO_EXIT_CODE, DataValidationError, SimulationError, UndefinedMetricError, UsageError
from .image_client import IMAGE_FORMAT, IMAGE_MODEL, IMAGE_SIZE, load_prompt, template_sha1
from .io_utils import read_csv, write_csv, write_json, write_text
from .loss_sim import ClaimOutcome, attach_losses, simulate_losses, write_claims_jsonl
from .metrics import GiniResult, aligned_correlation, normalized_gini, tie_sensitivity
from .models import SplitDataset, TierResult, run_tier
from .policy_gen import (
    RELEASED_COLUMNS,
    assert_no_hidden_columns,
    assign_roof_health,
    dataset_manifest,
    export_policy_table,
    format_table,
    generate_policies,
    roof_codes,
)
from .roof_channel import (
    PromptSpec,
    calibrate_labeler,
    channel_correlation,
    cluster_channel,
    embedding_channel,
    generate_prompts,
    noisy_label_channel,
    true_label_channel,
    write_channel_csv,
    write_prompt_manifest,
)

# 공개된 참조값: (Corr., Normalized Gini)
PUBLISHED_REFERENCE = {
    "tabular_only": (None, 0.3823),
    "cluster_labels": (0.4009, 0.5042),
    "embedding_features": (None, 0.7719),
    "noisy_label": (0.8062, 0.7271),
    "true_label": (1.0, 0.8310),
    "oracle": (1.0, 0.8379),
}
TIER_GROUPS = {
    "tabular_only": "Generic pipeline",
    "cluster_labels": "Image use",
    "embedding_features": "Image use",
    "noisy_label": "Image use",
    "true_label": "Image use",
    "oracle": "Best achievable",
}
TIER_TITLES = {
    "tabular_only": "RF (tabular only)",
    "cluster_labels": "RF + image embeddings clustered as labels",
    "embedding_features": "RF + image embedding features",
    "noisy_label": "RF + RoofHealth from a labeler",
    "true_label": "RF + true RoofHealth",
    "oracle": "Oracle (Bayes-optimal expected loss)",
}
SUBSTITUTE_NOTICES = {
    "cluster_labels": "SUBSTITUTE CHANNEL: k-means ids over synthetic class-conditional embeddings stand in for clustered image features",
    "embedding_features": "SUBSTITUTE CHANNEL: synthetic class-conditional Gaussian embeddings stand in for pretrained image features",
    "noisy_label": "SUBSTITUTE CHANNEL: an accuracy-calibrated noisy labeler stands in for a vision-language model",
}
LADDER_SLACK = 0.01
_stderr = Console(stderr=True)


# =========================
# 보고서 모델
# =========================
class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class TierRow(_Frozen):
    tier: str
    group: str
    normalized_gini: float
    raw_gini: float
    channel_correlation: Optional[float] = None
    aligned_correlation: Optional[float] = None
    labeler_accuracy: Optional[float] = None
    substitute_channel: bool = False
    reference_correlation: Optional[float] = None
    reference_gini: Optional[float] = None
    tie_sensitivity: float = 0.0


class SeedReport(_Frozen):
    seed: int
    config_fingerprint: str
    generation_fingerprint: str
    tiers: tuple[TierRow, ...]
    notices: tuple[str, ...] = ()
    ladder_violations: tuple[str, ...] = ()
    class_counts: dict[str, int] = {}


class AggregateRow(_Frozen):
    tier: str
    mean: float
    std: float
    n_seeds: int
    reference_gini: Optional[float] = None


class EvaluationReport(_Frozen):
    config_fingerprint: str
    seeds: tuple[SeedReport, ...]
    aggregate: tuple[AggregateRow, ...]
    ladder_violations: dict[str, tuple[str, ...]] = {}
    failed_seeds: dict[str, dict[str, str]] = {}
    notices: tuple[str, ...] = ()


# =========================
# 데이터셋 수명주기
# =========================
@dataclass
class SeedArtifacts:
    dataset: SplitDataset
    prompts: list[PromptSpec]
    outcomes: list[ClaimOutcome]
    extras: dict[str, dict] = field(default_factory=dict)


def split_ids(policies: pd.DataFrame, config: ExperimentConfig, seed: int) -> tuple[tuple[str, ...], tuple[str, ...]]:
    ids = policies["PolicyID"].to_numpy()
    if config.split.split_rule == "seeded-shuffle":
        ids = ids[make_rng(SeedSpec(seed, "split")).permutation(ids.size)]
    n_train = config.split.n_train
    return tuple(ids[:n_train]), tuple(ids[n_train : n_train + config.split.n_test])


def build_dataset(config: ExperimentConfig, seed: int, n_jobs: int = 1, template: str | None = None) -> SeedArtifacts:
    """정책 생성 → RoofHealth → 손해 → 프롬프트 → 분할 (채널 제외)."""
    gen = config.for_seed(seed)
    policies = assign_roof_health(generate_policies(gen, n_jobs=n_jobs), gen.thresholds)
    outcomes = simulate_losses(policies, gen.frequency_coeffs, gen.severity_coeffs, seed, n_jobs=n_jobs)
    policies = attach_losses(policies, outcomes)
    prompts = generate_prompts(policies, seed=SeedSpec(seed, "prompt"), template=template)
    train_ids, test_ids = split_ids(policies, config, seed)
    dataset = SplitDataset(policies, train_ids, test_ids, seed, gen.frequency_coeffs, gen.severity_coeffs)
    dataset.check_split()
    return SeedArtifacts(dataset, prompts, outcomes)


def compute_channels(artifacts: SeedArtifacts, config: ExperimentConfig, tiers: Sequence[TierSpec]) -> None:
    ds = artifacts.dataset
    seed = ds.master_seed
    kind = config.metrics.correlation
    for tier in tiers:
        params = tier.channel_params
        extras: dict = {}
        if tier.name in ("tabular_only", "oracle"):
            continue
        if tier.name == "true_label":
            outputs = true_label_channel(ds.policies)
        elif tier.name == "noisy_label":
            accuracy = params.accuracy
            if accuracy is None:
                accuracy = calibrate_labeler(
                    params.target_correlation,
                    params.confusion_mode,
                    config.generation.thresholds.class_proportions(),
                    seed=SeedSpec(seed, "calibration"),
                    batch=params.calibration_batch,
                )
                print(f"CHAN: noisy_label calibrated accuracy={accuracy:.4f} (target corr {params.target_correlation})")
            outputs = noisy_label_channel(ds.policies, accuracy, params.confusion_mode, SeedSpec(seed, "channel:noisy_label"))
            extras["labeler_accuracy"] = accuracy
        else:
            emb = embedding_channel(
                ds.policies,
                dim=params.dim,
                class_separation=params.class_separation,
                noise_sigma=params.noise_sigma,
                seed=SeedSpec(seed, f"channel:{tier.name}:embedding"),
                style_separation=params.style_separation,
                prompts=artifacts.prompts,
            )
            if tier.name == "cluster_labels":
                outputs = cluster_channel(emb, params.k, SeedSpec(seed, "channel:cluster_labels:kmeans"), params.max_iter)
                try:
                    aligned, perm = aligned_correlation(roof_codes(ds.policies), [o.cluster_id for o in outputs], kind)
                    extras["aligned_correlation"] = aligned
                    print(f"CHAN: cluster_labels aligned corr={aligned:.4f} (permutation {perm})")
                except UndefinedMetricError as e:
                    print(f"[yellow]CHAN: cluster alignment undefined -> {e}[/yellow]")
            else:
                outputs = emb
        ds.channels[tier.name] = outputs
        corr = None
        if tier.name != "embedding_features":
            try:
                corr = channel_correlation(ds.policies, outputs, kind)
            except UndefinedMetricError as e:
                print(f"[yellow]CHAN: {tier.name} correlation undefined -> {e}[/yellow]")
        ds.channel_correlations[tier.name] = corr
        artifacts.extras[tier.name] = extras


# =========================
# 파일 쓰기
# =========================
def seed_dir(config: ExperimentConfig, seed: int) -> Path:
    return Path(config.output_dir) / config_fingerprint(config) / f"seed-{seed}"


def write_datasets(artifacts: SeedArtifacts, out: Path, write_claims: bool = True) -> list[str]:
    ds = artifacts.dataset
    by_id = ds.policies.set_index("PolicyID", drop=False)
    train = by_id.loc[list(ds.train_ids)]
    test = by_id.loc[list(ds.test_ids)]

    files = [
        export_policy_table(ds.policies, out / "policies_full.csv", "full"),
        write_csv(format_table(train, RELEASED_COLUMNS + ("NextYearLoss",)), out / "train.csv"),
        export_policy_table(test, out / "test.csv", "released"),
        write_csv(format_table(test, ("PolicyID", "NextYearLoss")), out / "answers.csv"),
        write_prompt_manifest(artifacts.prompts, out / "prompts.jsonl"),
        write_prompt_manifest(artifacts.prompts, out / "prompts_private.jsonl", private=True),
    ]
    if write_claims:
        files.append(write_claims_jsonl(artifacts.outcomes, out / "claims.jsonl"))
    # 매 실행마다 테스트 파일 스키마 검사
    assert_no_hidden_columns(read_csv(out / "test.csv").columns, "test.csv")
    return files


def write_channels(artifacts: SeedArtifacts, out: Path) -> list[str]:
    return [write_channel_csv(o, out / "channels" / f"{name}.csv") for name, o in artifacts.dataset.channels.items()]


def write_manifest(config: ExperimentConfig, seed: int, out: Path, files: Iterable[str], template: str) -> str:
    manifest = dataset_manifest(
        config.for_seed(seed),
        experiment_fingerprint=config_fingerprint(config),
        split_rule=config.split.split_rule,
        prompt_template_sha1=template_sha1(template),
        image_request={"model": IMAGE_MODEL, "size": IMAGE_SIZE, "format": IMAGE_FORMAT},
        files=sorted(str(Path(f).relative_to(out)) for f in files),
    )
    return write_json(out / "manifest.json", manifest)


# =========================
# 실행
# =========================
def _score(dataset: SplitDataset, result: TierResult, options: MetricOptions) -> tuple[GiniResult, float]:
    answers = dataset.policies.set_index("PolicyID").loc[result.predictions["PolicyID"], "NextYearLoss"]
    y = answers.to_numpy(dtype=float)
    y_hat = result.predictions["Prediction"].to_numpy(dtype=float)
    return normalized_gini(y, y_hat, options.tie_policy), tie_sensitivity(y, y_hat)


def ladder_violations(gini: dict[str, float], slack: float = LADDER_SLACK) -> list[str]:
    """기대 순서: tabular < cluster < {noisy, embedding} < true <= oracle (+slack)."""
    out = []

    def check(lo: str, hi: str, strict: bool = True, tol: float = 0.0):
        if lo in gini and hi in gini:
            ok = gini[lo] < gini[hi] + tol if strict else gini[lo] <= gini[hi] + tol
            if not ok:
                out.append(f"{lo} ({gini[lo]:.4f}) !< {hi} ({gini[hi]:.4f})")

    check("tabular_only", "cluster_labels")
    for mid in ("noisy_label", "embedding_features"):
        check("cluster_labels", mid)
        check(mid, "true_label")
        check(mid, "oracle")
    check("true_label", "oracle", strict=False, tol=slack)
    # 오라클 우위: 모든 모델 티어 <= oracle + slack
    if "oracle" in gini:
        for name, g in gini.items():
            if name != "oracle" and g > gini["oracle"] + slack:
                out.append(f"oracle ({gini['oracle']:.4f}) dominated by {name} ({g:.4f})")
    return sorted(set(out))


def run_seed(
    config: ExperimentConfig,
    seed: int,
    tier_filter: Optional[Sequence[str]] = None,
    n_jobs: int = 1,
    quiet: bool = False,
) -> SeedReport:
    tiers = [t for t in config.tiers if not tier_filter or t.name in tier_filter]
    out = seed_dir(config, seed)
    timings: dict[str, float] = {}
    template = load_prompt(quiet=quiet)

    t0 = time.monotonic()
    artifacts = build_dataset(config, seed, n_jobs=n_jobs, template=template)
    timings["dataset"] = time.monotonic() - t0
    counts = artifacts.dataset.policies["RoofHealth"].value_counts().to_dict()
    print(f"GEN: seed={seed} policies={len(artifacts.dataset.policies)} roof={counts}")

    t0 = time.monotonic()
    compute_channels(artifacts, config, tiers)
    timings["channels"] = time.monotonic() - t0

    files = write_datasets(artifacts, out, config.write_claims) + write_channels(artifacts, out)

    rows, notices = [], []
    gini: dict[str, float] = {}
    for tier in tiers:
        t0 = time.monotonic()
        result = run_tier(artifacts.dataset, tier, config.forest, n_jobs=n_jobs, progress=not quiet)
        score, sensitivity = _score(artifacts.dataset, result, config.metrics)
        timings[f"tier:{tier.name}"] = time.monotonic() - t0
        gini[tier.name] = score.normalized
        reference_corr, reference_gini = PUBLISHED_REFERENCE[tier.name]
        extras = artifacts.extras.get(tier.name, {})
        rows.append(
            TierRow(
                tier=tier.name,
                group=TIER_GROUPS[tier.name],
                normalized_gini=score.normalized,
                raw_gini=score.raw,
                channel_correlation=result.metadata.get("channel_correlation"),
                aligned_correlation=extras.get("aligned_correlation"),
                labeler_accuracy=extras.get("labeler_accuracy"),
                substitute_channel=tier.is_substitute,
                reference_correlation=reference_corr,
                reference_gini=reference_gini,
                tie_sensitivity=sensitivity,
            )
        )
        if tier.is_substitute:
            notices.append(f"{tier.name}: {SUBSTITUTE_NOTICES[tier.name]}")
        pred = result.predictions.assign(Prediction=[f"{v:.6f}" for v in result.predictions["Prediction"]])
        files.append(write_csv(pred, out / "predictions" / f"{tier.name}.csv"))
        if config.dump_models and result.model is not None:
            files.append(write_json(out / "models" / f"{tier.name}.json", result.model.to_dict()))
        print(f"TIER {tier.name}: gini={score.normalized:.4f} ({timings[f'tier:{tier.name}']:.1f}s)")

    report = SeedReport(
        seed=seed,
        config_fingerprint=config_fingerprint(config),
        generation_fingerprint=config_fingerprint(config.for_seed(seed)),
        tiers=tuple(rows),
        notices=tuple(notices),
        ladder_violations=tuple(ladder_violations(gini)),
        class_counts={str(k): int(v) for k, v in sorted(counts.items())},
    )
    files.append(write_json(out / "report.json", report.model_dump(mode="json")))
    files.append(write_text(out / "report.txt", render_seed_table(report)))
    write_manifest(config, seed, out, files, template)
    write_json(out / "timings.json", {k: round(v, 3) for k, v in timings.items()})
    return report


def _run_seed_safely(config, seed, tier_filter, n_jobs, quiet):
    try:
        return seed, run_seed(config, seed, tier_filter, n_jobs=n_jobs, quiet=quiet), None
    except (SimulationError, OSError) as e:
        print(f"[red]RUN: seed {seed} failed -> {type(e).__name__}: {e}[/red]")
        code = e.exit_code if isinstance(e, SimulationError) else IO_EXIT_CODE
        return seed, None, {"error": type(e).__name__, "message": str(e), "exit_code": str(code)}
    except Exception as e:  # noqa: BLE001
        print(f"[red]RUN: seed {seed} crashed -> {e}[/red]")
        return seed, None, {
            "error": type(e).__name__, "message": str(e), "exit_code": "1", "trace": traceback.format_exc(limit=3),
        }


def run_experiment(
    config: ExperimentConfig,
    tier_filter: Optional[Sequence[str]] = None,
    n_jobs: int = N_JOBS,
    quiet: bool = False,
) -> EvaluationReport:
    start_all = time.monotonic()
    fingerprint = config_fingerprint(config)
    print(f"[green]RUN: start[/green] config={fingerprint} seeds={list(config.seeds)}")

    if n_jobs != 1 and len(config.seeds) > 1:
        results = Parallel(n_jobs=n_jobs)(
            delayed(_run_seed_safely)(config, s, tier_filter, 1, True) for s in config.seeds
        )
    else:
        results = [
            _run_seed_safely(config, s, tier_filter, n_jobs, quiet)
            for s in tqdm(config.seeds, desc="seeds", disable=quiet or len(config.seeds) == 1)
        ]

    reports = [r for _, r, _ in results if r is not None]
    failed = {str(s): err for s, _, err in results if err is not None}
    aggregate = summarize_seeds(reports) if reports else []
    notices = sorted({n for r in reports for n in r.notices})
    report = EvaluationReport(
        config_fingerprint=fingerprint,
        seeds=tuple(reports),
        aggregate=tuple(aggregate),
        ladder_violations={str(r.seed): r.ladder_violations for r in reports if r.ladder_violations},
        failed_seeds=failed,
        notices=tuple(notices),
    )
    top = Path(config.output_dir) / fingerprint
    write_json(top / "aggregate.json", report.model_dump(mode="json"))
    write_text(top / "aggregate.txt", render_aggregate_table(report))
    print(f"[green]RUN: end (total {int(time.monotonic() - start_all)}s)[/green]")
    return report


def summarize_seeds(reports: Sequence[SeedReport]) -> list[AggregateRow]:
    if not reports:
        raise UsageError("summarize_seeds needs at least one report")
    tier_sets = {tuple(row.tier for row in r.tiers) for r in reports}
    if len(tier_sets) != 1:
        raise UsageError(f"reports cover different tier sets: {sorted(tier_sets)}")
    rows = []
    for name in tier_sets.pop():
        values = np.array([next(t.normalized_gini for t in r.tiers if t.tier == name) for r in reports])
        # 동일 값이면 반올림 오차 없이 그대로
        same = bool(np.all(values == values[0]))
        rows.append(
            AggregateRow(
                tier=name,
                mean=float(values[0]) if same else float(values.mean()),
                std=0.0 if same else float(values.std(ddof=0)),
                n_seeds=len(reports),
                reference_gini=PUBLISHED_REFERENCE[name][1],
            )
        )
    return rows


def load_seed_reports(root: str | Path) -> list[SeedReport]:
    paths = sorted(Path(root).glob("seed-*/report.json"), key=lambda p: int(p.parent.name.split("-", 1)[1]))
    if not paths:
        raise UsageError(f"no seed reports under {root}")
    return [SeedReport.model_validate_json(p.read_text(encoding="utf-8")) for p in paths]


def aggregate_from_disk(root: str | Path) -> EvaluationReport:
    reports = load_seed_reports(root)
    report = EvaluationReport(
        config_fingerprint=reports[0].config_fingerprint,
        seeds=tuple(reports),
        aggregate=tuple(summarize_seeds(reports)),
        ladder_violations={str(r.seed): r.ladder_violations for r in reports if r.ladder_violations},
        notices=tuple(sorted({n for r in reports for n in r.notices})),
    )
    write_json(Path(root) / "aggregate.json", report.model_dump(mode="json"))
    write_text(Path(root) / "aggregate.txt", render_aggregate_table(report))
    return report


# =========================
# 제출 채점
# =========================
def _read_keyed(path: str | Path, value_col: str) -> pd.Series:
    try:
        frame = read_csv(path)
    except FileNotFoundError as e:
        raise DataValidationError(f"file not found: {path}") from e
    if list(frame.columns) != ["PolicyID", value_col]:
        raise DataValidationError(f"{path} must have header PolicyID,{value_col}", list(frame.columns))
    dup = sorted(set(frame["PolicyID"][frame["PolicyID"].duplicated()]))
    if dup:
        raise DataValidationError(f"{path} has duplicate policy ids", dup)
    try:
        values = frame[value_col].astype(float)
    except ValueError as e:
        raise DataValidationError(f"{path} has non-numeric {value_col}: {e}") from e
    return pd.Series(values.to_numpy(), index=frame["PolicyID"].to_numpy())


def score_submission(
    predictions_file: str | Path, answers_file: str | Path, options: MetricOptions | None = None
) -> GiniResult:
    options = options or MetricOptions()
    preds = _read_keyed(predictions_file, "Prediction")
    answers = _read_keyed(answers_file, "NextYearLoss")
    offenders = sorted(set(preds.index) ^ set(answers.index))
    if offenders:
        raise DataValidationError("prediction and answer policy ids differ", offenders)
    y_hat = preds.loc[answers.index].to_numpy()
    if y_hat.size and np.all(y_hat == y_hat[0]):
        _stderr.print("[yellow]SCORE: constant predictions; the result reflects the tie policy only[/yellow]")
    return normalized_gini(answers.to_numpy(), y_hat, options.tie_policy)


# =========================
# 표 렌더링
# =========================
def _fmt(v: Optional[float]) -> str:
    return "-" if v is None else f"{v:.4f}"


def _render(table: Table) -> str:
    buf = io.StringIO()
    Console(file=buf, width=140, color_system=None, force_terminal=False).print(table)
    return buf.getvalue()


def render_seed_table(report: SeedReport) -> str:
    table = Table(title=f"Normalized Gini, seed {report.seed} (config {report.config_fingerprint})")
    for col in ("Group", "Method", "Corr.", "Normalized Gini", "Ref. Corr.", "Ref. Gini", "Note"):
        table.add_column(col)
    by_tier = {row.tier: row for row in report.tiers}
    for name in TIER_ORDER:
        row = by_tier.get(name)
        if row is None:
            continue
        table.add_row(
            row.group, TIER_TITLES[name], _fmt(row.channel_correlation), _fmt(row.normalized_gini),
            _fmt(row.reference_correlation), _fmt(row.reference_gini), "substitute" if row.substitute_channel else "",
        )
    lines = [_render(table)]
    lines += [f"NOTICE {n}" for n in report.notices]
    lines += [f"LADDER {v}" for v in report.ladder_violations]
    return "\n".join(lines) + "\n"


def render_aggregate_table(report: EvaluationReport) -> str:
    table = Table(title=f"Normalized Gini over {len(report.seeds)} seed(s) (config {report.config_fingerprint})")
    for col in ("Group", "Method", "Mean", "Std", "Ref. Gini"):
        table.add_column(col)
    by_tier = {row.tier: row for row in report.aggregate}
    for name in TIER_ORDER:
        row = by_tier.get(name)
        if row is None:
            continue
        table.add_row(TIER_GROUPS[name], TIER_TITLES[name], f"{row.mean:.4f}", f"{row.std:.4f}", _fmt(row.reference_gini))
    lines = [_render(table)]
    lines += [f"NOTICE {n}" for n in report.notices]
    for seed, violations in sorted(report.ladder_violations.items()):
        lines += [f"LADDER seed {seed}: {v}" for v in violations]
    for seed, err in sorted(report.failed_seeds.items()):
        lines.append(f"FAILED seed {seed}: {err.get('error')}: {err.get('message')}")
    return "\n".join(lines) + "\n"
