"""Exception hierarchy. Each family maps to one CLI exit code."""


class StJemaError(Exception):
    exit_code = 1


class ConfigError(StJemaError, ValueError):
    exit_code = 2


class DataError(StJemaError, ValueError):
    exit_code = 3


class FormatError(DataError):
    """A ROI time-series file or checkpoint does not match its documented layout."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


class NumericError(StJemaError, FloatingPointError):
    exit_code = 4
