# src/distributions.py
"""
시드 고정 샘플러 모음.

스트림 규칙(버전 고정):
  - 알고리즘: numpy Philox4x64-10 (counter-based), Generator 래퍼
  - key = master_seed + 2**64 * blake2b-64(stream_label, little-endian)
  - counter는 0에서 시작, 전역으로 전진하지 않음 → (master_seed, stream_label)이 같으면 항상 같은 수열
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Annotated, Literal, Sequence, Union

import numpy as np
from pydantic import Field, TypeAdapter, ValidationError

from .errors import ParameterError, UsageError

PRNG_ALGORITHM = "philox4x64-10"
PRNG_ID = f"{PRNG_ALGORITHM}+blake2b64-label/numpy-{np.__version__}"

_U64 = 1 << 64
_PROB_TOL = 1e-12


def label_key(stream_label: str) -> int:
    """스트림 라벨 → 64-bit 서브스트림 키 (blake2b, 8바이트 digest)."""
    digest = hashlib.blake2b(stream_label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class SeedSpec:
    master_seed: int
    stream_label: str

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < _U64:
            raise ParameterError(f"master_seed must be a 64-bit unsigned integer, got {self.master_seed}")

    def child(self, *parts: object) -> "SeedSpec":
        suffix = ":".join(str(p) for p in parts)
        return SeedSpec(self.master_seed, f"{self.stream_label}/{suffix}")


def stream(master_seed: int, *parts: object) -> SeedSpec:
    return SeedSpec(int(master_seed), ":".join(str(p) for p in parts))


def make_rng(seed: SeedSpec) -> np.random.Generator:
    key = int(seed.master_seed) + _U64 * label_key(seed.stream_label)
    return np.random.Generator(np.random.Philox(key=key))


# =========================
# 분포 파라미터 (tagged union)
# =========================
def _check_positive(family: str, **values: float) -> None:
    for name, v in values.items():
        if not (math.isfinite(v) and v > 0):
            raise ParameterError(f"{family}: {name} must be a finite positive number, got {v}")


def _check_probs(family: str, probs: Sequence[float]) -> None:
    if not probs:
        raise ParameterError(f"{family}: probs must be nonempty")
    if any((not math.isfinite(p)) or p < 0 for p in probs):
        raise ParameterError(f"{family}: probs must be finite and nonnegative, got {list(probs)}")
    total = math.fsum(probs)
    if abs(total - 1.0) > _PROB_TOL:
        raise ParameterError(f"{family}: probs must sum to 1 (got {total!r})")


@dataclass(frozen=True)
class LogNormal:
    mu_log: float
    sigma_log: float
    family: Literal["lognormal"] = "lognormal"

    def __post_init__(self):
        _check_positive("LogNormal", sigma_log=self.sigma_log)
        if not math.isfinite(self.mu_log):
            raise ParameterError(f"LogNormal: mu_log must be finite, got {self.mu_log}")


@dataclass(frozen=True)
class Beta:
    a: float
    b: float
    family: Literal["beta"] = "beta"

    def __post_init__(self):
        _check_positive("Beta", a=self.a, b=self.b)


@dataclass(frozen=True)
class Categorical:
    labels: tuple[str, ...]
    probs: tuple[float, ...]
    family: Literal["categorical"] = "categorical"

    def __post_init__(self):
        if len(self.labels) != len(self.probs):
            raise ParameterError("Categorical: labels and probs must have equal length")
        if len(set(self.labels)) != len(self.labels):
            raise ParameterError(f"Categorical: duplicate labels in {list(self.labels)}")
        _check_probs("Categorical", self.probs)


@dataclass(frozen=True)
class NegBinomial:
    r: float
    mean: float
    family: Literal["negbinomial"] = "negbinomial"

    def __post_init__(self):
        _check_positive("NegBinomial", r=self.r, mean=self.mean)


@dataclass(frozen=True)
class GammaShapeScale:
    k: float
    theta: float
    family: Literal["gamma"] = "gamma"

    def __post_init__(self):
        _check_positive("Gamma", k=self.k, theta=self.theta)


@dataclass(frozen=True)
class Normal:
    mu: float
    sigma: float
    family: Literal["normal"] = "normal"

    def __post_init__(self):
        if not math.isfinite(self.mu):
            raise ParameterError(f"Normal: mu must be finite, got {self.mu}")
        if not (math.isfinite(self.sigma) and self.sigma >= 0):
            raise ParameterError(f"Normal: sigma must be finite and nonnegative, got {self.sigma}")


@dataclass(frozen=True)
class FicoBuckets:
    bucket_bounds: tuple[tuple[int, int], ...]
    bucket_probs: tuple[float, ...]
    family: Literal["fico_buckets"] = "fico_buckets"

    def __post_init__(self):
        if len(self.bucket_bounds) != len(self.bucket_probs):
            raise ParameterError("FicoBuckets: bucket_bounds and bucket_probs must have equal length")
        _check_probs("FicoBuckets", self.bucket_probs)
        prev_hi = None
        for lo, hi in self.bucket_bounds:
            if not (300 <= lo <= hi <= 850):
                raise ParameterError(f"FicoBuckets: bucket ({lo}, {hi}) outside [300, 850]")
            if prev_hi is not None and lo <= prev_hi:
                raise ParameterError("FicoBuckets: buckets must be ordered and disjoint")
            prev_hi = hi


DistributionParams = Annotated[
    Union[LogNormal, Beta, Categorical, NegBinomial, GammaShapeScale, Normal, FicoBuckets],
    Field(discriminator="family"),
]
_PARAMS_ADAPTER: TypeAdapter = TypeAdapter(DistributionParams)

# 기본 FICO 버킷: 300-579 / 580-669 / 670-739 / 740-799 / 800-850 (미국 점수대 분포 근사)
DEFAULT_FICO = FicoBuckets(
    bucket_bounds=((300, 579), (580, 669), (670, 739), (740, 799), (800, 850)),
    bucket_probs=(0.16, 0.17, 0.21, 0.25, 0.21),
)


# =========================
# 샘플링
# =========================
def draw(params: DistributionParams, rng: np.random.Generator, n: int) -> np.ndarray:
    """이미 만들어진 Generator에서 n개 추출. sample()과 정책별 스트림이 공유."""
    if isinstance(params, LogNormal):
        return rng.lognormal(params.mu_log, params.sigma_log, size=n)
    if isinstance(params, Beta):
        return rng.beta(params.a, params.b, size=n)
    if isinstance(params, Categorical):
        idx = rng.choice(len(params.labels), size=n, p=np.asarray(params.probs))
        return np.asarray(params.labels, dtype=object)[idx]
    if isinstance(params, NegBinomial):
        return gamma_poisson(rng, params.r, np.full(n, params.mean))
    if isinstance(params, GammaShapeScale):
        return rng.gamma(params.k, params.theta, size=n)
    if isinstance(params, Normal):
        return rng.normal(params.mu, params.sigma, size=n)
    if isinstance(params, FicoBuckets):
        bucket = rng.choice(len(params.bucket_probs), size=n, p=np.asarray(params.bucket_probs))
        bounds = np.asarray(params.bucket_bounds, dtype=np.int64)
        # 양 끝점 포함 정수 균등
        return rng.integers(bounds[bucket, 0], bounds[bucket, 1] + 1, dtype=np.int64)
    raise ParameterError(f"unsupported distribution params: {params!r}")


def parse_params(raw: dict) -> DistributionParams:
    """{"family": "beta", "a": 2, "b": 5} 같은 설정 dict → 파라미터 객체."""
    try:
        return _PARAMS_ADAPTER.validate_python(raw)
    except ValidationError as e:
        raise ParameterError(f"invalid distribution params {raw!r}:\n{e}") from e


def sample(params: DistributionParams | dict, seed: SeedSpec, n: int) -> np.ndarray:
    if n < 0:
        raise UsageError(f"sample size must be nonnegative, got {n}")
    if isinstance(params, dict):
        params = parse_params(params)
    return draw(params, make_rng(seed), int(n))


def gamma_poisson(rng: np.random.Generator, r: float, mean) -> np.ndarray:
    """NB(size=r, mean=m)을 Poisson(Gamma(shape=r, scale=m/r)) 혼합으로 추출 (r 비정수 허용)."""
    if not (math.isfinite(r) and r > 0):
        raise ParameterError(f"NegBinomial: r must be positive, got {r}")
    mean = np.asarray(mean, dtype=float)
    if np.any(mean < 0) or not np.all(np.isfinite(mean)):
        raise ParameterError("NegBinomial: mean must be finite and nonnegative")
    rate = rng.gamma(r, mean / r)
    return rng.poisson(rate).astype(np.int64)


def negbinomial_via_gamma_poisson(r: float, mean: float, seed: SeedSpec) -> int:
    if mean == 0:
        if not (math.isfinite(r) and r > 0):
            raise ParameterError(f"NegBinomial: r must be positive, got {r}")
        return 0
    return int(gamma_poisson(make_rng(seed), r, np.array([mean]))[0])
