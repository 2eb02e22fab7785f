# src/cli.py
from __future__ import annotations

import json
import sys
import time
from pathlib import Path
from typing import List, Optional

import typer
from rich import print

from .config import TIER_ORDER, MetricOptions, load_experiment_config
from .errors import IO_EXIT_CODE, SimulationError
from .harness import (
    aggregate_from_disk,
    build_dataset,
    compute_channels,
    render_aggregate_table,
    run_experiment,
    score_submission,
    seed_dir,
    write_channels,
    write_datasets,
    write_manifest,
)
from .image_client import load_prompt
from .policy_gen import export_policy_table
from .roof_channel import write_prompt_manifest

app = typer.Typer(add_completion=False, help="Synthetic roof-risk insurance data and tiered model evaluation.")

ConfigOpt = typer.Option(None, "--config", help="YAML experiment config (default: CONFIG_PATH)")
SeedOpt = typer.Option(None, "--seed", help="master seed; repeat for several seeds")
OutOpt = typer.Option(None, "--out", help="output directory (default: OUTPUT_DIR)")
TierOpt = typer.Option(None, "--tier", help="run only these tiers; repeatable")


def _load(config: Optional[Path], seeds: Optional[List[int]], out: Optional[Path], tiers: Optional[List[str]] = None):
    unknown = sorted(set(tiers or ()) - set(TIER_ORDER))
    if unknown:
        raise typer.BadParameter(f"unknown tier(s) {unknown}; choose from {list(TIER_ORDER)}", param_hint="--tier")
    return load_experiment_config(
        config,
        seeds=tuple(seeds) if seeds else None,
        output_dir=str(out) if out else None,
    )


def _fail(e: SimulationError | OSError) -> None:
    if isinstance(e, OSError):
        print(f"[red]ERROR (I/O):[/red] {e}")
        raise typer.Exit(code=IO_EXIT_CODE)
    print(f"[red]ERROR ({type(e).__name__}):[/red] {e}")
    raise typer.Exit(code=e.exit_code)


def _shared_exit_code(failed: dict[str, dict[str, str]]) -> int:
    codes = {int(err.get("exit_code", 1)) for err in failed.values()}
    return codes.pop() if len(codes) == 1 else 1


@app.command()
def generate(config: Optional[Path] = ConfigOpt, seed: Optional[List[int]] = SeedOpt, out: Optional[Path] = OutOpt):
    """정책 테이블 + 프롬프트 매니페스트 + manifest.json"""
    try:
        cfg = _load(config, seed, out)
        template = load_prompt()
        for s in cfg.seeds:
            t0 = time.monotonic()
            art = build_dataset(cfg, s, template=template)
            d = seed_dir(cfg, s)
            policies = art.dataset.policies.drop(columns=["NextYearLoss"])
            files = [
                export_policy_table(policies, d / "policies_full.csv", "full"),
                export_policy_table(policies, d / "policies.csv", "released"),
                write_prompt_manifest(art.prompts, d / "prompts.jsonl"),
                write_prompt_manifest(art.prompts, d / "prompts_private.jsonl", private=True),
            ]
            write_manifest(cfg, s, d, files, template)
            print(f"GEN: seed={s} -> {d} ({time.monotonic() - t0:.1f}s)")
    except (SimulationError, OSError) as e:
        _fail(e)


@app.command()
def simulate(config: Optional[Path] = ConfigOpt, seed: Optional[List[int]] = SeedOpt, out: Optional[Path] = OutOpt):
    """다음 해 손해 시뮬레이션 + train/test/answers 분할"""
    try:
        cfg = _load(config, seed, out)
        template = load_prompt(quiet=True)
        for s in cfg.seeds:
            art = build_dataset(cfg, s, template=template)
            d = seed_dir(cfg, s)
            files = write_datasets(art, d, cfg.write_claims)
            write_manifest(cfg, s, d, files, template)
            n_claims = sum(o.claim_count for o in art.outcomes)
            print(f"SIM: seed={s} claims={n_claims} -> {d}")
    except (SimulationError, OSError) as e:
        _fail(e)


@app.command()
def channels(
    config: Optional[Path] = ConfigOpt,
    seed: Optional[List[int]] = SeedOpt,
    out: Optional[Path] = OutOpt,
    tier: Optional[List[str]] = TierOpt,
):
    """지붕 채널(라벨/노이즈 라벨/임베딩/군집) 출력"""
    try:
        cfg = _load(config, seed, out, tier)
        template = load_prompt(quiet=True)
        tiers = [t for t in cfg.tiers if not tier or t.name in tier]
        for s in cfg.seeds:
            art = build_dataset(cfg, s, template=template)
            compute_channels(art, cfg, tiers)
            written = write_channels(art, seed_dir(cfg, s))
            for name, corr in art.dataset.channel_correlations.items():
                shown = "n/a" if corr is None else f"{corr:.4f}"
                print(f"CHAN: seed={s} {name} corr={shown}")
            print(f"CHAN: seed={s} wrote {len(written)} file(s)")
    except (SimulationError, OSError) as e:
        _fail(e)


@app.command()
def run(
    config: Optional[Path] = ConfigOpt,
    seed: Optional[List[int]] = SeedOpt,
    out: Optional[Path] = OutOpt,
    tier: Optional[List[str]] = TierOpt,
    n_jobs: Optional[int] = typer.Option(None, "--jobs", help="parallel workers (default: N_JOBS)"),
    quiet: bool = typer.Option(False, "--quiet", help="no progress bars"),
):
    """전체 실험: 데이터 → 채널 → 티어별 모델 → 보고서"""
    try:
        cfg = _load(config, seed, out, tier)
        kwargs = {} if n_jobs is None else {"n_jobs": n_jobs}
        report = run_experiment(cfg, tier_filter=tier, quiet=quiet, **kwargs)
    except (SimulationError, OSError) as e:
        _fail(e)
    print(render_aggregate_table(report))
    if report.failed_seeds and not report.seeds:
        raise typer.Exit(code=_shared_exit_code(report.failed_seeds))


@app.command()
def score(
    predictions: Path = typer.Option(..., "--predictions", help="CSV with header PolicyID,Prediction"),
    answers: Path = typer.Option(..., "--answers", help="CSV with header PolicyID,NextYearLoss"),
    tie_policy: str = typer.Option("index", "--tie-policy", help="index | average"),
):
    """제출 파일 채점 → GiniResult JSON (stdout)"""
    try:
        options = MetricOptions(tie_policy=tie_policy)
    except ValueError as e:
        raise typer.BadParameter(str(e), param_hint="--tie-policy")
    try:
        result = score_submission(predictions, answers, options)
    except (SimulationError, OSError) as e:
        _fail(e)
    sys.stdout.write(json.dumps(result.to_dict(), sort_keys=True) + "\n")


@app.command()
def report(
    out: Path = typer.Option(..., "--out", help="experiment directory <out>/<fingerprint> holding seed-*/report.json"),
):
    """디스크의 시드별 report.json으로 집계 보고서 재작성"""
    try:
        agg = aggregate_from_disk(out)
    except (SimulationError, OSError) as e:
        _fail(e)
    print(render_aggregate_table(agg))


def main():
    app()


if __name__ == "__main__":
    main()
