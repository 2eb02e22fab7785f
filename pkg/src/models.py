# src/models.py
"""
티어별 특성 조립 + 랜덤 포레스트 회귀 (저장소 내 구현).

트리 규칙:
  - 노드마다 mtry개 후보 열을 비복원 추출, 열 번호 오름차순으로 검사
  - 분할 기준: 제곱합 감소 최대 (동점이면 낮은 열 번호, 그다음 낮은 임계값)
  - 임계값 = 인접한 두 정렬값의 중점, x <= 임계값 → 왼쪽
  - 리프 = 해당 학습 행 목표값의 평균
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from .config import ForestParams, FrequencyCoeffs, SeverityCoeffs, TierSpec, config_fingerprint
from .distributions import SeedSpec, make_rng
from .errors import IntegrityError, UsageError
from .loss_sim import oracle_predict
from .policy_gen import HIDDEN_COLUMNS, ROOF_LABELS
from .roof_channel import ChannelOutput

BASE_COLUMNS = ("HouseValue", "HouseAge", "WallTypeIsWood", "AreaRisk", "CreditScore")
WALL_ENCODING = {"Brick": 0.0, "Wood": 1.0}


@dataclass
class FeatureMatrix:
    X: np.ndarray
    columns: tuple[str, ...]
    policy_ids: np.ndarray
    target: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.X.shape != (len(self.policy_ids), len(self.columns)):
            raise UsageError(f"matrix shape {self.X.shape} does not match ids/columns")
        if not np.all(np.isfinite(self.X)):
            raise UsageError("feature matrix contains missing or non-finite values")

    def take(self, ids: Sequence[str]) -> "FeatureMatrix":
        pos = {pid: i for i, pid in enumerate(self.policy_ids)}
        try:
            idx = np.array([pos[pid] for pid in ids], dtype=np.int64)
        except KeyError as e:
            raise UsageError(f"policy {e.args[0]} is not in the feature matrix") from None
        return FeatureMatrix(
            self.X[idx], self.columns, self.policy_ids[idx], None if self.target is None else self.target[idx]
        )


def _by_policy(outputs: Sequence[ChannelOutput], ids) -> list[ChannelOutput]:
    lookup = {o.policy_id: o for o in outputs}
    missing = [pid for pid in ids if pid not in lookup]
    if missing:
        raise UsageError(f"channel outputs missing for {len(missing)} policies, e.g. {missing[:3]}")
    return [lookup[pid] for pid in ids]


def assemble_features(
    policies: pd.DataFrame, channel_outputs: Sequence[ChannelOutput] | None, tier: TierSpec
) -> FeatureMatrix:
    if tier.name == "oracle":
        raise UsageError("the oracle tier bypasses the model and has no feature matrix")
    ids = policies["PolicyID"].to_numpy()
    blocks = [
        policies["HouseValue"].to_numpy(dtype=float),
        policies["HouseAge"].to_numpy(dtype=float),
        policies["WallType"].map(WALL_ENCODING).to_numpy(dtype=float),
        policies["AreaRisk"].to_numpy(dtype=float),
        policies["CreditScore"].to_numpy(dtype=float),
    ]
    columns = list(BASE_COLUMNS)
    X = np.column_stack(blocks)

    if tier.name != "tabular_only":
        if channel_outputs is None:
            raise UsageError(f"tier {tier.name} needs channel outputs")
        outs = _by_policy(channel_outputs, ids)
        if tier.name == "embedding_features":
            if any(o.embedding is None for o in outs):
                raise UsageError("embedding_features tier needs embedding outputs")
            extra = np.vstack([o.embedding for o in outs])
            extra_cols = [f"Emb{j:02d}" for j in range(extra.shape[1])]
        elif tier.name == "cluster_labels":
            if any(o.cluster_id is None for o in outs):
                raise UsageError("cluster_labels tier needs cluster outputs")
            cid = np.array([o.cluster_id for o in outs], dtype=np.int64)
            k = tier.channel_params.k
            if tier.encoding == "one_hot":
                extra = np.eye(k)[cid]
                extra_cols = [f"Cluster{j}" for j in range(k)]
            else:
                extra, extra_cols = cid[:, None].astype(float), ["ClusterID"]
        else:  # noisy_label / true_label
            if any(o.predicted_label is None for o in outs):
                raise UsageError(f"{tier.name} tier needs label outputs")
            code = np.array([int(o.predicted_label) for o in outs], dtype=np.int64)
            if tier.encoding == "one_hot":
                extra = np.eye(3)[code]
                extra_cols = [f"Roof{label}" for label in ROOF_LABELS]
            else:
                extra, extra_cols = code[:, None].astype(float), ["RoofCode"]
        X = np.column_stack([X, extra])
        columns += extra_cols

    leaked = [c for c in columns if c in HIDDEN_COLUMNS]
    if leaked:
        raise UsageError(f"hidden columns in feature matrix: {leaked}")
    target = policies["NextYearLoss"].to_numpy(dtype=float) if "NextYearLoss" in policies.columns else None
    return FeatureMatrix(np.ascontiguousarray(X, dtype=float), tuple(columns), ids, target)


# =========================
# 회귀 트리
# =========================
class RegressionTree:
    def __init__(self, max_depth: Optional[int] = None, min_leaf: int = 5, mtry: Optional[int] = None):
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.mtry = mtry
        self.feature: np.ndarray = np.empty(0, dtype=np.int64)
        self.threshold: np.ndarray = np.empty(0)
        self.left: np.ndarray = np.empty(0, dtype=np.int64)
        self.right: np.ndarray = np.empty(0, dtype=np.int64)
        self.value: np.ndarray = np.empty(0)

    def _best_split(self, sub: np.ndarray, yn: np.ndarray, cols: np.ndarray):
        m = yn.size
        order = np.argsort(sub, axis=0, kind="stable")
        xs = np.take_along_axis(sub, order, axis=0)
        ys = yn[order]
        left_sum = np.cumsum(ys, axis=0)[:-1]
        total = float(yn.sum())
        n_left = np.arange(1, m, dtype=float)[:, None]
        n_right = m - n_left
        gain = left_sum**2 / n_left + (total - left_sum) ** 2 / n_right - total**2 / m
        valid = (xs[1:] > xs[:-1]) & (n_left >= self.min_leaf) & (n_right >= self.min_leaf)
        gain = np.where(valid, gain, -np.inf)
        # (열, 위치) 순으로 펼쳐 첫 최대값 → 낮은 열 번호, 낮은 임계값 우선
        flat = gain.T.ravel()
        best = int(np.argmax(flat))
        if not np.isfinite(flat[best]):
            return None
        j, pos = divmod(best, m - 1)
        lo, hi = xs[pos, j], xs[pos + 1, j]
        thr = (lo + hi) / 2
        if not lo <= thr < hi:
            thr = lo
        return int(cols[j]), float(thr), float(flat[best])

    def fit(self, X: np.ndarray, y: np.ndarray, rng: np.random.Generator, rows: Optional[np.ndarray] = None):
        p = X.shape[1]
        mtry = self.mtry or p
        feature, threshold, left, right, value = [], [], [], [], []

        def new_node() -> int:
            for arr, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (value, 0.0)):
                arr.append(v)
            return len(feature) - 1

        rows = np.arange(X.shape[0]) if rows is None else rows
        stack = [(new_node(), rows, 0)]
        while stack:
            node, idx, depth = stack.pop()
            yn = y[idx]
            value[node] = float(yn.mean())
            if idx.size < 2 * self.min_leaf or (self.max_depth is not None and depth >= self.max_depth):
                continue
            sse = float(((yn - yn.mean()) ** 2).sum())
            if sse <= 0:
                continue
            cols = np.sort(rng.choice(p, size=mtry, replace=False))
            split = self._best_split(X[np.ix_(idx, cols)], yn, cols)
            if split is None or split[2] <= sse * 1e-12:
                continue
            j, thr, _ = split
            go_left = X[idx, j] <= thr
            feature[node], threshold[node] = j, thr
            left[node], right[node] = new_node(), new_node()
            # 오른쪽 먼저 push → 왼쪽부터 전개 (노드 번호 전위 순서)
            stack.append((right[node], idx[~go_left], depth + 1))
            stack.append((left[node], idx[go_left], depth + 1))

        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=float)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=float)
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                break
            at = node[inner]
            go_left = X[inner, f[inner]] <= self.threshold[at]
            node[inner] = np.where(go_left, self.left[at], self.right[at])
        return self.value[node]

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }


# =========================
# 포레스트
# =========================
@dataclass
class ForestModel:
    trees: list[RegressionTree]
    columns: tuple[str, ...]
    params: ForestParams
    seed: SeedSpec
    log_target: bool = False

    def to_dict(self) -> dict:
        return {
            "columns": list(self.columns),
            "params": self.params.model_dump(mode="json"),
            "seed": {"master_seed": self.seed.master_seed, "stream_label": self.seed.stream_label},
            "trees": [t.to_dict() for t in self.trees],
        }


def _fit_tree(X, y, params: ForestParams, mtry: int, seed: SeedSpec) -> RegressionTree:
    rng = make_rng(seed)
    rows = rng.integers(0, X.shape[0], X.shape[0]) if params.bootstrap else None
    tree = RegressionTree(max_depth=params.max_depth, min_leaf=params.min_leaf, mtry=mtry)
    return tree.fit(X, y, rng, rows)


def fit_forest(
    train: FeatureMatrix,
    params: ForestParams,
    seed: SeedSpec | None = None,
    n_jobs: int = 1,
    progress: bool = False,
) -> ForestModel:
    if train.target is None:
        raise UsageError("training matrix has no target")
    n = train.X.shape[0]
    if n < 2 * params.min_leaf:
        raise UsageError(f"need at least {2 * params.min_leaf} training rows, got {n}")
    if np.any(train.target < 0):
        raise UsageError("training target must be nonnegative")
    seed = seed or SeedSpec(params.seed, "forest")
    mtry = params.resolved_mtry(train.X.shape[1])
    y = np.log1p(train.target) if params.log_target else train.target.astype(float)
    seeds = [seed.child("tree", i) for i in range(params.n_trees)]

    if n_jobs == 1:
        it = tqdm(seeds, desc="trees", leave=False, disable=not progress)
        trees = [_fit_tree(train.X, y, params, mtry, s) for s in it]
    else:
        trees = Parallel(n_jobs=n_jobs)(delayed(_fit_tree)(train.X, y, params, mtry, s) for s in seeds)
    return ForestModel(trees, train.columns, params, seed, params.log_target)


def predict_forest(model: ForestModel, features: FeatureMatrix) -> np.ndarray:
    if tuple(features.columns) != tuple(model.columns):
        raise UsageError(f"feature columns {features.columns} do not match training columns {model.columns}")
    total = np.zeros(features.X.shape[0])
    for tree in model.trees:
        total += tree.predict(features.X)
    pred = total / len(model.trees)
    return np.expm1(pred) if model.log_target else pred


# =========================
# 티어 실행
# =========================
@dataclass
class SplitDataset:
    """한 시드의 정책 테이블(손해 포함) + 분할 + 채널 출력."""

    policies: pd.DataFrame
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    master_seed: int
    frequency: FrequencyCoeffs
    severity: SeverityCoeffs
    channels: dict[str, list[ChannelOutput]] = field(default_factory=dict)
    channel_correlations: dict[str, Optional[float]] = field(default_factory=dict)

    def check_split(self) -> None:
        overlap = sorted(set(self.train_ids) & set(self.test_ids))
        if overlap:
            raise IntegrityError("train and test policy ids overlap", overlap)


@dataclass
class TierResult:
    tier: str
    predictions: pd.DataFrame
    metadata: dict
    model: Optional[ForestModel] = None


def run_tier(
    dataset: SplitDataset, tier: TierSpec, forest_params: ForestParams, n_jobs: int = 1, progress: bool = False
) -> TierResult:
    dataset.check_split()
    meta = {
        "tier": tier.name,
        "substitute_channel": tier.is_substitute,
        "channel_correlation": dataset.channel_correlations.get(tier.name),
        "n_train": len(dataset.train_ids),
        "n_test": len(dataset.test_ids),
    }
    test_rows = dataset.policies.set_index("PolicyID").loc[list(dataset.test_ids)].reset_index()
    if tier.name == "oracle":
        preds = oracle_predict(test_rows, dataset.frequency, dataset.severity)
        meta.update(model="oracle", channel_correlation=1.0)
        return TierResult(tier.name, preds, meta)

    outputs = dataset.channels.get(tier.name)
    full = assemble_features(dataset.policies, outputs, tier)
    train, test = full.take(dataset.train_ids), full.take(dataset.test_ids)
    seed = SeedSpec(dataset.master_seed, f"forest:{tier.name}:{forest_params.seed}")
    model = fit_forest(train, forest_params, seed=seed, n_jobs=n_jobs, progress=progress)
    preds = pd.DataFrame({"PolicyID": test.policy_ids, "Prediction": predict_forest(model, test)})
    meta.update(
        model="random_forest",
        n_features=len(full.columns),
        forest_fingerprint=config_fingerprint(forest_params),
        channel_params_hash=outputs[0].channel_params_hash if outputs else None,
    )
    return TierResult(tier.name, preds, meta, model)
