from typing import Optional


class ContractError(ValueError):
    """A precondition of an operation was violated by the caller."""


class DimensionMismatchError(ContractError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"embedding has length {actual}, store expects {expected}")
        self.expected = expected
        self.actual = actual


class ScriptExhaustedError(ContractError):
    pass


class ParseError(ValueError):
    """Malformed JSONL payload. `line` is 1-based, `column` 1-based when known."""

    def __init__(self, message: str, line: int, column: Optional[int] = None):
        position = f"line {line}" if column is None else f"line {line}, column {column}"
        super().__init__(f"{position}: {message}")
        self.line = line
        self.column = column


class EndpointError(RuntimeError):
    pass


class RetryableEndpointError(EndpointError):
    pass


class DivergenceError(RuntimeError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
