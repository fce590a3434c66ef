"""Exception types shared across the package."""


class UnlearnFairError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(UnlearnFairError, ValueError):
    pass


class DomainError(UnlearnFairError, ValueError):
    pass


class ContractError(UnlearnFairError, RuntimeError):
    pass


class NumericError(UnlearnFairError, ArithmeticError):
    pass


class FormatError(UnlearnFairError, ValueError):
    """Malformed binary input. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(UnlearnFairError, ValueError):
    pass


class StageError(UnlearnFairError, RuntimeError):
    """A pipeline stage failed; carries enough context to locate the failing job."""

    def __init__(self, stage: str, message: str, method: str | None = None, seed: int | None = None):
        self.stage = stage
        self.method = method
        self.seed = seed
        self.detail = message
        where = [f"stage={stage}"]
        if method is not None:
            where.append(f"method={method}")
        if seed is not None:
            where.append(f"seed={seed}")
        super().__init__(f"{' '.join(where)}: {message}")

    def to_record(self) -> dict:
        return {
            "error": type(self).__name__,
            "stage": self.stage,
            "method": self.method,
            "seed": self.seed,
            "message": self.detail,
        }
