# src/errors.py
from __future__ import annotations

# 파일 읽기/쓰기 실패 (OSError)
IO_EXIT_CODE = 1


class SimulationError(Exception):
    """모든 도메인 예외의 루트. exit_code는 CLI가 그대로 사용."""

    exit_code = 1


class ParameterError(SimulationError, ValueError):
    exit_code = 2


class UsageError(SimulationError, ValueError):
    exit_code = 2


class ConfigError(SimulationError, ValueError):
    exit_code = 2


class DataValidationError(SimulationError):
    exit_code = 3

    def __init__(self, message: str, offenders: list[str] | None = None):
        self.offenders = list(offenders or [])
        if self.offenders:
            shown = ", ".join(self.offenders[:10])
            more = f" (+{len(self.offenders) - 10} more)" if len(self.offenders) > 10 else ""
            message = f"{message}: {shown}{more}"
        super().__init__(message)


class IntegrityError(DataValidationError):
    exit_code = 3


class UndefinedMetricError(SimulationError):
    exit_code = 4


class CalibrationError(SimulationError):
    exit_code = 4

    def __init__(self, message: str, achievable: tuple[float, float]):
        self.achievable = achievable
        lo, hi = achievable
        super().__init__(f"{message} (achievable correlation range: [{lo:.4f}, {hi:.4f}])")
