"""Exception hierarchy shared across the workbench."""


class TscBenchError(Exception):
    """Base class for all workbench errors."""


class ConfigError(TscBenchError, ValueError):
    """Invalid configuration value. ``field`` names the offending setting."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class NumericInputError(TscBenchError, ValueError):
    pass


class TrainingError(TscBenchError, RuntimeError):
    """Raised when training diverges (non-finite loss)."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class CheckpointError(TscBenchError):
    pass


class MalformedCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    def __init__(self, expected: int, found):
        self.expected = expected
        self.found = found
        super().__init__(f"checkpoint format version mismatch: expected {expected}, found {found}")


class CheckpointShapeError(CheckpointError):
    pass


class BackendError(TscBenchError):
    """Base class for LLM backend failures."""


class BackendConfigError(BackendError):
    pass


class BackendTimeoutError(BackendError):
    pass


class BackendStatusError(BackendError):
    def __init__(self, status: int, body: str = ""):
        self.status = status
        self.body = body
        super().__init__(f"backend returned HTTP {status}")


class BackendTransportError(BackendError):
    pass


class MalformedResponseError(BackendError):
    pass


class TraceParseError(TscBenchError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")
