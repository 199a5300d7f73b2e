"""
Exception hierarchy for the clearance-maximizing steering controller.
"""


class ClearanceMpcError(Exception):
    """Base class for every error raised by this package."""


class InvalidProblemError(ClearanceMpcError, ValueError):
    """A model, problem or configuration violates its stated invariants."""


class PathTooShortError(ClearanceMpcError, ValueError):
    """The planner path cannot cover the distance implied by the speed profile."""

    def __init__(self, required_length, available_length):
        self.required_length = float(required_length)
        self.available_length = float(available_length)
        super().__init__(
            f"Reference path too short: {self.required_length:.3f} m required, "
            f"{self.available_length:.3f} m available"
        )


class ScenarioError(ClearanceMpcError):
    """A scenario file failed to parse or validate."""

    def __init__(self, message, source=None, line=None, field=None):
        self.source = source
        self.line = line
        self.field = field
        location = []
        if source:
            location.append(str(source))
        if line is not None:
            location.append(f"line {line}")
        if field:
            location.append(f"field '{field}'")
        prefix = f"{', '.join(location)}: " if location else ""
        super().__init__(f"{prefix}{message}")


class OutputError(ClearanceMpcError):
    """Result files could not be written or read."""


class DataFileError(ClearanceMpcError):
    """A result CSV does not match its documented schema."""

    def __init__(self, message, source=None, line=None):
        self.source = source
        self.line = line
        location = str(source) if source else ""
        if line is not None:
            location = f"{location}, line {line}" if location else f"line {line}"
        super().__init__(f"{location}: {message}" if location else message)
