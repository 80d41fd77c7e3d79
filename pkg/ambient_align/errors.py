"""
Pipeline-level error types shared by configuration loading and the CLI.
"""


class ConfigError(ValueError):
    """A configuration field violates a constraint."""

    def __init__(self, field: str, constraint: str):
        super().__init__(f"Invalid config field '{field}': {constraint}")
        self.field = field
        self.constraint = constraint


class MissingArtifactError(FileNotFoundError):
    """A prerequisite artifact of a pipeline command does not exist."""

    def __init__(self, path, hint: str = ""):
        message = f"Required artifact not found: {path}"
        if hint:
            message += f" ({hint})"
        super().__init__(message)
        self.path = path


class DivergenceError(RuntimeError):
    """Training produced a nonfinite loss."""
