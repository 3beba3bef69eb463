from __future__ import annotations


class ImprintFitError(Exception):
    """Base error. `code` doubles as the per-gene status in result tables."""

    code = "error"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class DomainError(ImprintFitError, ValueError):
    code = "domain_error"


class UndefinedDirectionError(DomainError):
    pass


class SingularDesignError(DomainError):
    code = "singular_design"

    def __init__(self, message: str, column: str | None = None):
        super().__init__(message)
        self.column = column


class InsufficientDataError(ImprintFitError):
    code = "insufficient_data"


class OptimizationFailedError(ImprintFitError, RuntimeError):
    code = "optimization_failed"


class NestingViolationError(ImprintFitError):
    code = "nesting_violation"


class ParseError(ImprintFitError, ValueError):
    code = "parse_error"

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(f"{where}{message}")
        self.path = path
        self.line = line
