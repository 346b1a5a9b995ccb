# errors.py
from typing import Optional


class QsocError(Exception):
    """Root of every error raised by the simulator."""


class ConfigError(QsocError, ValueError):
    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        self.message = message
        self.field = field
        self.line = line
        where = []
        if field:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class DomainError(QsocError, ValueError):
    pass


class UnreachableError(DomainError):
    pass


class NoSignalError(DomainError):
    pass


class ThresholdError(DomainError):
    pass


class FitError(QsocError):
    pass


class RecordParseError(QsocError, ValueError):
    def __init__(self, message: str, line: int):
        self.line = line
        super().__init__(f"{message} (line {line})")
