"""Exception types shared across the package."""


class MMFusionError(Exception):
    """Base class for all package errors."""

    code = "error"


class ContractError(MMFusionError, ValueError):
    """A caller violated an operation's precondition (shapes, ranges, empty input)."""

    code = "contract"


class ConfigError(MMFusionError, ValueError):
    """Invalid configuration value."""

    code = "config"


class NumericError(MMFusionError, ArithmeticError):
    """NaN or Inf produced during computation."""

    code = "numeric"

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"{detail} in op {op!r}" if detail else f"numeric failure in op {op!r}"
        super().__init__(msg)


class FormatError(MMFusionError, ValueError):
    """A binary or text file does not match its declared layout."""

    code = "format"

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class DivergenceError(MMFusionError, RuntimeError):
    """Training produced a non-finite loss."""

    code = "divergence"

    def __init__(self, message: str, diagnostics: dict | None = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)
