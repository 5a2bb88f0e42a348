"""
Exception hierarchy with CLI exit codes
"""
from enum import IntEnum
from typing import Any, Dict, Optional


class ExitCode(IntEnum):
    SUCCESS = 0
    USAGE = 1
    DATA = 2
    NUMERICAL = 3
    BENCHMARK = 4


class LogitMCMCError(Exception):
    """Base error; carries the exit code the CLI reports"""
    exit_code: ExitCode = ExitCode.USAGE

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail

    def to_record(self) -> Dict[str, Any]:
        return {
            "error": type(self).__name__,
            "exit_code": int(self.exit_code),
            "detail": self.detail,
        }


# Usage / configuration errors
class UsageError(LogitMCMCError):
    exit_code = ExitCode.USAGE


class ConfigurationError(LogitMCMCError):
    exit_code = ExitCode.USAGE


# Data errors
class DataError(LogitMCMCError):
    exit_code = ExitCode.DATA


class DimensionError(DataError):
    pass


class DegenerateOutcomeError(DataError):
    """Only one outcome class present; the case-control split is meaningless"""


class SchemaError(DataError):
    pass


class IngestionError(DataError):
    pass


class GenerationError(DataError):
    pass


class ComparisonError(DataError):
    pass


class ChainParseError(DataError):
    def __init__(self, detail: str, line: Optional[int] = None):
        if line is not None:
            detail = f"line {line}: {detail}"
        super().__init__(detail)
        self.line = line


# Numerical errors
class NumericalError(LogitMCMCError):
    exit_code = ExitCode.NUMERICAL

    def __init__(self, detail: str, row: Optional[int] = None):
        super().__init__(detail)
        self.row = row


class InitializationError(NumericalError):
    pass


class ESSUndefinedError(NumericalError):
    pass


class InsufficientDrawsError(NumericalError):
    pass


class CombinationError(NumericalError):
    pass


class EnsembleError(NumericalError):
    def __init__(self, detail: str, partition: Optional[int] = None):
        if partition is not None:
            detail = f"partition {partition}: {detail}"
        super().__init__(detail)
        self.partition = partition


# Benchmark errors
class BenchmarkError(LogitMCMCError):
    exit_code = ExitCode.BENCHMARK
