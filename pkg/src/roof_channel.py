# src/roof_channel.py
"""
이미지 모달리티 대체물.

  - 프롬프트 매니페스트 (이미지 생성 요청 그대로, API 호출 없음)
  - true_label:  진짜 RoofHealth
  - noisy_label: 정확도 a로 진짜 라벨 유지, 나머지는 confusion_mode로 오답 (VLM 라벨러 대체)
  - embedding:   클래스 조건부 가우시안 혼합 (이미지 임베딩 대체)
  - cluster:     임베딩 k-means(k-means++) 군집 번호 (군집 라벨 대체)
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, model_validator

from .distributions import SeedSpec, make_rng
from .errors import CalibrationError, ParameterError, UsageError
from .image_client import load_prompt
from .io_utils import canonical_json, sha1, write_csv, write_jsonl
from .metrics import ordinal_correlation
from .policy_gen import ROOF_LABELS, RoofHealth, roof_codes

ROOF_STYLES = ("gable", "hip", "flat", "mansard", "shed")
SHINGLE_COLORS = ("dark-gray", "light-gray", "brown", "black", "red-tile")
CHANNEL_REGISTRY = ("true_label", "noisy_label", "embedding", "cluster")
DESCRIPTOR_SLOTS = ("surface", "edge", "extra")

ConfusionMode = Literal["uniform", "adjacent"]


# =========================
# 프롬프트
# =========================
class DescriptorTable(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    surface: dict[str, tuple[str, ...]] = {
        "Good": ("even rows of intact shingles", "uniform shingle coloring with crisp tab lines"),
        "Fair": ("slightly faded shingles", "a few curled shingle tabs"),
        "Bad": ("multiple missing shingles", "patches of exposed underlayment"),
    }
    edge: dict[str, tuple[str, ...]] = {
        "Good": ("well-sealed ridge lines", "straight drip edges"),
        "Fair": ("ridge line with mild wear", "minor granule loss along the eaves"),
        "Bad": ("damaged or sagging ridge", "broken and uneven eave edges"),
    }
    extra: dict[str, tuple[str, ...]] = {
        "Good": ("tight flashing around the chimney", "clean gutters"),
        "Fair": ("slightly lifted flashing near the chimney", "light leaf litter in the gutters"),
        "Bad": ("rusted and torn flashing", "gutters clogged with debris and moss"),
    }

    @model_validator(mode="after")
    def _complete_and_disjoint(self):
        owner: dict[str, str] = {}
        for slot in DESCRIPTOR_SLOTS:
            table = getattr(self, slot)
            for label in ROOF_LABELS:
                if not table.get(label):
                    raise ValueError(f"descriptor slot {slot!r} has no entries for {label}")
                for text in table[label]:
                    if owner.setdefault(text, label) != label:
                        raise ValueError(f"descriptor {text!r} is shared by {owner[text]} and {label}")
        return self

    def lookup(self, text: str) -> Optional[RoofHealth]:
        for slot in DESCRIPTOR_SLOTS:
            for label, entries in getattr(self, slot).items():
                if text in entries:
                    return RoofHealth.from_label(label)
        return None


@dataclass(frozen=True)
class PromptSpec:
    policy_id: str
    roof_style: str
    shingle_color: str
    surface_descriptor: str
    edge_descriptor: str
    extra_descriptor: str
    prompt_text: str
    roof_health: RoofHealth

    def manifest_row(self, private: bool = False) -> dict:
        row = {
            "policy_id": self.policy_id,
            "roof_style": self.roof_style,
            "shingle_color": self.shingle_color,
            "surface": self.surface_descriptor,
            "edge": self.edge_descriptor,
            "extra": self.extra_descriptor,
            "prompt": self.prompt_text,
        }
        if private:
            row["roof_health"] = self.roof_health.label
        return row


def generate_prompts(
    policies: pd.DataFrame,
    descriptor_table: DescriptorTable | None = None,
    seed: SeedSpec | None = None,
    template: str | None = None,
) -> list[PromptSpec]:
    table = descriptor_table or DescriptorTable()
    seed = seed or SeedSpec(0, "prompt")
    template = template if template is not None else load_prompt(quiet=True)
    for slot in DESCRIPTOR_SLOTS:
        for label in ROOF_LABELS:
            if not getattr(table, slot).get(label):
                raise ParameterError(f"empty descriptor list for {slot}/{label}")

    prompts = []
    for pid, code in zip(policies["PolicyID"], roof_codes(policies)):
        rh = RoofHealth(int(code))
        rng = make_rng(seed.child(pid))
        style = ROOF_STYLES[rng.integers(len(ROOF_STYLES))]
        color = SHINGLE_COLORS[rng.integers(len(SHINGLE_COLORS))]
        picks = []
        for slot in DESCRIPTOR_SLOTS:
            entries = getattr(table, slot)[rh.label]
            picks.append(entries[rng.integers(len(entries))])
        text = template.format(
            roof_style=style, shingle_color=color, surface=picks[0], edge=picks[1], extra=picks[2]
        )
        prompts.append(PromptSpec(pid, style, color, *picks, text, rh))
    return prompts


def decode_prompt(prompt: PromptSpec, descriptor_table: DescriptorTable | None = None) -> RoofHealth:
    """서술어 → RoofHealth 역조회. 세 슬롯이 모두 같은 범주여야 함."""
    table = descriptor_table or DescriptorTable()
    found = {
        table.lookup(t) for t in (prompt.surface_descriptor, prompt.edge_descriptor, prompt.extra_descriptor)
    }
    if len(found) != 1 or None in found:
        raise ParameterError(f"{prompt.policy_id}: descriptors map to {found}")
    return found.pop()


def write_prompt_manifest(prompts: Sequence[PromptSpec], path: str | Path, private: bool = False) -> str:
    return write_jsonl(path, (p.manifest_row(private) for p in prompts))


# =========================
# 채널 출력
# =========================
@dataclass(frozen=True)
class ChannelOutput:
    policy_id: str
    channel_name: str
    channel_params_hash: str
    predicted_label: Optional[RoofHealth] = None
    embedding: Optional[np.ndarray] = None
    cluster_id: Optional[int] = None

    def __post_init__(self):
        if self.channel_name not in CHANNEL_REGISTRY:
            raise ParameterError(f"unknown channel {self.channel_name!r}")
        if self.predicted_label is None and self.embedding is None and self.cluster_id is None:
            raise ParameterError(f"{self.policy_id}: channel output carries no information")


def params_hash(**params) -> str:
    return sha1(canonical_json(params))


def true_label_channel(policies: pd.DataFrame) -> list[ChannelOutput]:
    h = params_hash(channel="true_label")
    return [
        ChannelOutput(pid, "true_label", h, predicted_label=RoofHealth(int(c)))
        for pid, c in zip(policies["PolicyID"], roof_codes(policies))
    ]


# 오답 라벨 표: truth → (첫 후보, 둘째 후보, 첫 후보 확률)
# adjacent: Good↔Bad 혼동 가중치를 절반으로 줄인 뒤 재정규화
_WRONG = {
    "uniform": ((1, 2, 1 / 2), (0, 2, 1 / 2), (0, 1, 1 / 2)),
    "adjacent": ((1, 2, 2 / 3), (0, 2, 1 / 2), (1, 0, 2 / 3)),
}


def _check_accuracy(accuracy: float) -> None:
    if not (1 / 3 - 1e-12 <= accuracy <= 1.0):
        raise ParameterError(f"labeler accuracy must lie in [1/3, 1], got {accuracy}")


def corrupt_labels(truth: np.ndarray, accuracy: float, mode: ConfusionMode, u_keep: np.ndarray, u_wrong: np.ndarray):
    """공통 난수(u_keep, u_wrong)로 라벨 손상 → 정확도에 대해 단조."""
    if mode not in _WRONG:
        raise ParameterError(f"unknown confusion_mode {mode!r}")
    table = np.asarray(_WRONG[mode])
    first = table[truth, 0].astype(np.int64)
    second = table[truth, 1].astype(np.int64)
    wrong = np.where(u_wrong < table[truth, 2], first, second)
    return np.where(u_keep < accuracy, truth, wrong)


def noisy_label_channel(
    policies: pd.DataFrame, accuracy: float, confusion_mode: ConfusionMode = "uniform", seed: SeedSpec | None = None
) -> list[ChannelOutput]:
    _check_accuracy(accuracy)
    seed = seed or SeedSpec(0, "noisy-label")
    truth = roof_codes(policies)
    rng = make_rng(seed)
    u_keep = rng.random(truth.size)
    u_wrong = rng.random(truth.size)
    labels = corrupt_labels(truth, accuracy, confusion_mode, u_keep, u_wrong)
    h = params_hash(channel="noisy_label", accuracy=accuracy, confusion_mode=confusion_mode)
    return [
        ChannelOutput(pid, "noisy_label", h, predicted_label=RoofHealth(int(c)))
        for pid, c in zip(policies["PolicyID"], labels)
    ]


def calibrate_labeler(
    target_correlation: float,
    confusion_mode: ConfusionMode = "uniform",
    class_proportions: Sequence[float] = (0.55, 0.25, 0.20),
    seed: SeedSpec | None = None,
    batch: int = 100_000,
    tolerance: float = 0.005,
    max_iter: int = 40,
) -> float:
    """목표 상관을 주는 정확도를 [1/3, 1] 이분 탐색으로 찾음."""
    if not (0 < target_correlation <= 1):
        raise ParameterError(f"target correlation must lie in (0, 1], got {target_correlation}")
    props = np.asarray(class_proportions, dtype=float)
    if props.shape != (3,) or np.any(props < 0) or abs(props.sum() - 1) > 1e-9:
        raise ParameterError(f"class_proportions must be 3 nonnegative values summing to 1, got {list(props)}")
    seed = seed or SeedSpec(0, "calibration")
    rng = make_rng(seed)
    truth = rng.choice(3, size=batch, p=props)
    u_keep = rng.random(batch)
    u_wrong = rng.random(batch)

    def measure(a: float) -> float:
        return ordinal_correlation(truth, corrupt_labels(truth, a, confusion_mode, u_keep, u_wrong))

    lo, hi = 1 / 3, 1.0
    r_hi = measure(hi)
    if target_correlation >= r_hi - tolerance:
        return hi
    r_lo = measure(lo)
    if target_correlation < r_lo - tolerance:
        raise CalibrationError(f"target correlation {target_correlation} is unreachable", (r_lo, r_hi))
    if abs(r_lo - target_correlation) <= tolerance:
        return lo
    mid = (lo + hi) / 2
    for _ in range(max_iter):
        mid = (lo + hi) / 2
        r = measure(mid)
        if abs(r - target_correlation) <= tolerance:
            break
        if r < target_correlation:
            lo = mid
        else:
            hi = mid
    return mid


def _orthonormal_basis(dim: int, m: int, seed: SeedSpec) -> np.ndarray:
    if m > dim:
        raise ParameterError(f"need {m} orthogonal directions but embedding dim is {dim}")
    g = make_rng(seed.child("basis")).standard_normal((dim, m))
    q, r = np.linalg.qr(g)
    # 부호 고정 → 플랫폼 LAPACK 차이에 무관
    return q * np.sign(np.diag(r))


def embedding_channel(
    policies: pd.DataFrame,
    dim: int = 32,
    class_separation: float = 4.0,
    noise_sigma: float = 1.0,
    seed: SeedSpec | None = None,
    style_separation: float = 0.0,
    prompts: Sequence[PromptSpec] | None = None,
) -> list[ChannelOutput]:
    if dim < 3:
        raise ParameterError(f"embedding dim must be >= 3, got {dim}")
    if class_separation < 0 or noise_sigma <= 0 or style_separation < 0:
        raise ParameterError("class_separation, style_separation must be >= 0 and noise_sigma > 0")
    seed = seed or SeedSpec(0, "embedding")
    codes = roof_codes(policies)
    n = codes.size
    use_style = style_separation > 0
    if use_style and (prompts is None or len(prompts) != n):
        raise UsageError("style_separation > 0 needs one PromptSpec per policy")
    n_dirs = 3 + (len(ROOF_STYLES) + len(SHINGLE_COLORS) if use_style else 0)
    basis = _orthonormal_basis(dim, n_dirs, seed)

    emb = class_separation * basis[:, codes].T
    if use_style:
        style_idx = np.array([3 + ROOF_STYLES.index(p.roof_style) for p in prompts])
        color_idx = np.array([3 + len(ROOF_STYLES) + SHINGLE_COLORS.index(p.shingle_color) for p in prompts])
        emb = emb + style_separation * (basis[:, style_idx].T + basis[:, color_idx].T)
    emb = emb + noise_sigma * make_rng(seed.child("noise")).standard_normal((n, dim))

    h = params_hash(
        channel="embedding", dim=dim, class_separation=class_separation,
        noise_sigma=noise_sigma, style_separation=style_separation,
    )
    return [ChannelOutput(pid, "embedding", h, embedding=emb[i]) for i, pid in enumerate(policies["PolicyID"])]


# =========================
# k-means (k-means++ 초기화)
# =========================
def kmeans_plus_plus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    min_sq = np.full(n, np.inf)
    for i in range(1, k):
        min_sq = np.minimum(min_sq, np.sum((points - centers[i - 1]) ** 2, axis=1))
        total = min_sq.sum()
        if total > 0:
            centers[i] = points[rng.choice(n, p=min_sq / total)]
        else:
            centers[i] = points[rng.integers(n)]
    return centers


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100, tol: float = 1e-8):
    centers = kmeans_plus_plus_init(points, k, rng)
    labels = np.zeros(points.shape[0], dtype=np.int64)
    for _ in range(max_iter):
        sq = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(sq, axis=1)
        # 고정 순서 누적 → 병렬도와 무관한 중심 갱신
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, points)
        counts = np.bincount(labels, minlength=k)
        new_centers = centers.copy()
        filled = counts > 0
        new_centers[filled] = sums[filled] / counts[filled, None]
        moved = float(np.linalg.norm(new_centers - centers, axis=1).sum())
        centers = new_centers
        if moved < tol:
            break
    sq = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return centers, np.argmin(sq, axis=1)


def cluster_channel(
    embeddings: Sequence[ChannelOutput], k: int = 3, seed: SeedSpec | None = None, max_iter: int = 100
) -> list[ChannelOutput]:
    if k < 2:
        raise ParameterError(f"k must be >= 2, got {k}")
    if any(o.embedding is None for o in embeddings):
        raise UsageError("cluster_channel needs embedding outputs")
    if len(embeddings) < k:
        raise UsageError(f"cannot form {k} clusters from {len(embeddings)} points")
    seed = seed or SeedSpec(0, "cluster")
    points = np.vstack([o.embedding for o in embeddings])
    _, labels = kmeans(points, k, make_rng(seed), max_iter=max_iter)
    h = params_hash(channel="cluster", k=k, max_iter=max_iter, embedding=embeddings[0].channel_params_hash)
    return [
        ChannelOutput(o.policy_id, "cluster", h, embedding=o.embedding, cluster_id=int(c))
        for o, c in zip(embeddings, labels)
    ]


# =========================
# 보조
# =========================
def label_codes(outputs: Sequence[ChannelOutput]) -> np.ndarray:
    if any(o.predicted_label is None for o in outputs):
        raise UsageError("channel outputs carry no predicted labels")
    return np.array([int(o.predicted_label) for o in outputs], dtype=np.int64)


def channel_frame(outputs: Sequence[ChannelOutput]) -> pd.DataFrame:
    frame = pd.DataFrame({"PolicyID": [o.policy_id for o in outputs]})
    if outputs and outputs[0].predicted_label is not None:
        frame["PredictedLabel"] = [o.predicted_label.label for o in outputs]
    if outputs and outputs[0].cluster_id is not None:
        frame["ClusterID"] = [o.cluster_id for o in outputs]
    if outputs and outputs[0].embedding is not None:
        emb = np.vstack([o.embedding for o in outputs])
        for j in range(emb.shape[1]):
            frame[f"Emb{j:02d}"] = [f"{v:.6f}" for v in emb[:, j]]
    return frame


def write_channel_csv(outputs: Sequence[ChannelOutput], path: str | Path) -> str:
    return write_csv(channel_frame(outputs), path)


def channel_correlation(policies: pd.DataFrame, outputs: Sequence[ChannelOutput], kind="pearson") -> float:
    """라벨 채널은 예측 라벨, 군집 채널은 (정렬 없이) 군집 번호 그대로 진짜 라벨과 상관."""
    truth = roof_codes(policies)
    if outputs and outputs[0].predicted_label is not None:
        other = label_codes(outputs)
    elif outputs and outputs[0].cluster_id is not None:
        other = np.array([o.cluster_id for o in outputs], dtype=np.int64)
    else:
        raise UsageError("correlation needs label or cluster outputs")
    return ordinal_correlation(truth, other, kind)
