# src/metrics.py
"""
순위 기반 평가지표.

  C_k = 예측 내림차순으로 정렬한 실제값의 누적합, Y = sum y
  G_raw(y, ŷ) = (1/n) * sum_k C_k / Y - (n+1)/(2n)
  G_norm(y, ŷ) = G_raw(y, ŷ) / G_raw(y, y)

동점 처리(tie_policy):
  index:   동일 예측값은 원래 순서(인덱스 오름차순) 유지
  average: 동점 구간을 실제값 오름차순/내림차순으로 각각 정렬한 두 극단값의 평균

Corr. = 서수 코드(0/1/2)의 Pearson 상관 (spearman 선택 가능).
"""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass
from typing import Literal, Sequence

import numpy as np
from scipy import optimize, stats

from .errors import UndefinedMetricError, UsageError

TiePolicy = Literal["index", "average"]


@dataclass(frozen=True)
class GiniResult:
    raw: float
    perfect_raw: float
    normalized: float
    n: int
    tie_policy: str

    def to_dict(self) -> dict:
        return asdict(self)


def _as_pair(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.ndim != 1 or y_hat.ndim != 1 or y.shape != y_hat.shape:
        raise UsageError(f"y and y_hat must be 1-d vectors of equal length, got {y.shape} and {y_hat.shape}")
    if y.size == 0:
        raise UsageError("gini needs at least one observation")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(y_hat))):
        raise UsageError("y and y_hat must be finite")
    return y, y_hat


def _gini_from_order(y: np.ndarray, order: np.ndarray, total: float) -> float:
    n = y.size
    cumulative = np.cumsum(y[order])
    return float(cumulative.sum() / total / n - (n + 1) / (2 * n))


def raw_gini(y, y_hat, tie_policy: TiePolicy = "index") -> float:
    y, y_hat = _as_pair(y, y_hat)
    if np.any(y < 0):
        raise UsageError("y must be nonnegative")
    total = float(y.sum())
    if total <= 0:
        raise UndefinedMetricError("gini is undefined when sum(y) = 0")
    if tie_policy == "index":
        order = np.lexsort((np.arange(y.size), -y_hat))
        return _gini_from_order(y, order, total)
    if tie_policy == "average":
        low = _gini_from_order(y, np.lexsort((y, -y_hat)), total)
        high = _gini_from_order(y, np.lexsort((-y, -y_hat)), total)
        return (low + high) / 2
    raise UsageError(f"unknown tie_policy {tie_policy!r}")


def normalized_gini(y, y_hat, tie_policy: TiePolicy = "index") -> GiniResult:
    raw = raw_gini(y, y_hat, tie_policy)
    perfect = raw_gini(y, y, tie_policy)
    if perfect <= 0:
        raise UndefinedMetricError("normalized gini is undefined for constant y (perfect gini is 0)")
    return GiniResult(raw=raw, perfect_raw=perfect, normalized=raw / perfect, n=len(y), tie_policy=tie_policy)


def tie_sensitivity(y, y_hat) -> float:
    """index/average 동점 정책 간 정규화 Gini 차이 (절대값)."""
    return abs(normalized_gini(y, y_hat, "index").normalized - normalized_gini(y, y_hat, "average").normalized)


# =========================
# 서수 상관
# =========================
def ordinal_codes(labels: Sequence) -> np.ndarray:
    """RoofHealth / 'Good'|'Fair'|'Bad' / 정수 코드를 정수 배열로."""
    out = []
    for v in labels:
        if isinstance(v, str):
            code = {"good": 0, "fair": 1, "bad": 2}.get(v.strip().lower())
            if code is None:
                raise UsageError(f"unknown roof label {v!r}")
            out.append(code)
        else:
            out.append(int(v))
    return np.asarray(out, dtype=np.int64)


def ordinal_correlation(labels_a, labels_b, kind: Literal["pearson", "spearman"] = "pearson") -> float:
    a = ordinal_codes(labels_a)
    b = ordinal_codes(labels_b)
    if a.shape != b.shape:
        raise UsageError(f"label vectors differ in length: {a.size} vs {b.size}")
    if a.size < 2 or np.all(a == a[0]) or np.all(b == b[0]):
        raise UndefinedMetricError("correlation is undefined for constant label vectors")
    if kind == "pearson":
        r = float(np.corrcoef(a, b)[0, 1])
    elif kind == "spearman":
        r = float(stats.spearmanr(a, b)[0])
    else:
        raise UsageError(f"unknown correlation kind {kind!r}")
    return max(-1.0, min(1.0, r))


EXACT_ALIGNMENT_MAX_K = 8


def _mapped_stats(perms: np.ndarray, n_c: np.ndarray, t_c: np.ndarray, t: np.ndarray, kind: str) -> np.ndarray:
    """순열별(행) 군집→코드 매핑의 상관. 군집 단위 집계만 사용."""
    n = t.size
    if kind == "spearman":
        # 매핑 값의 중간 순위: 더 작은 값을 받은 군집의 크기 합 + (n_c + 1) / 2
        below = (perms[:, None, :] < perms[:, :, None]).astype(float) @ n_c
        values = below + (n_c + 1) / 2
    else:
        values = perms.astype(float)
    mean_m = values @ n_c / n
    var_m = (values**2) @ n_c / n - mean_m**2
    cov = values @ t_c / n - mean_m * t.mean()
    var_t = float(t.var())
    with np.errstate(divide="ignore", invalid="ignore"):
        r = cov / np.sqrt(var_m * var_t)
    r = np.where(var_m > 1e-12, r, -np.inf)
    return np.where(np.isfinite(r), np.clip(r, -1.0, 1.0), r)


def aligned_correlation(truth, cluster_ids, kind: Literal["pearson", "spearman"] = "pearson") -> tuple[float, tuple[int, ...]]:
    """군집 번호 → 서수 코드 재배치 중 상관이 최대인 것.

    k <= 8: 모든 순열(k!)을 군집 집계로 한 번에 계산.
    k > 8: 공분산을 최대화하는 선형 할당(linear_sum_assignment)으로 매핑을 고르고 그 상관을 보고.
    """
    if kind not in ("pearson", "spearman"):
        raise UsageError(f"unknown correlation kind {kind!r}")
    truth = ordinal_codes(truth)
    cluster_ids = ordinal_codes(cluster_ids)
    if truth.shape != cluster_ids.shape:
        raise UsageError(f"label vectors differ in length: {truth.size} vs {cluster_ids.size}")
    if truth.size < 2 or np.all(truth == truth[0]):
        raise UndefinedMetricError("correlation is undefined for constant label vectors")
    if np.any(cluster_ids < 0):
        raise UsageError("cluster ids must be nonnegative")
    k = int(cluster_ids.max()) + 1
    t = stats.rankdata(truth) if kind == "spearman" else truth.astype(float)
    n_c = np.bincount(cluster_ids, minlength=k).astype(float)
    t_c = np.bincount(cluster_ids, weights=t, minlength=k)

    if k <= EXACT_ALIGNMENT_MAX_K:
        perms = np.array(list(itertools.permutations(range(k))), dtype=np.int64)
        r = _mapped_stats(perms, n_c, t_c, t, kind)
        best = int(np.argmax(r))
        if not np.isfinite(r[best]):
            raise UndefinedMetricError("no permutation yields a defined correlation")
        return float(r[best]), tuple(int(v) for v in perms[best])

    # 공분산 분자 = sum_c code(c) * (t_c - n_c * mean t) → 선형 할당
    centred = t_c - n_c * t.mean()
    rows, cols = optimize.linear_sum_assignment(-np.outer(centred, np.arange(k)))
    perm = np.empty(k, dtype=np.int64)
    perm[rows] = cols
    r = _mapped_stats(perm[None, :], n_c, t_c, t, kind)[0]
    if not np.isfinite(r):
        raise UndefinedMetricError("no mapping yields a defined correlation")
    return float(r), tuple(int(v) for v in perm)
