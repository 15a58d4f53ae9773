from __future__ import annotations


class BevAlignError(Exception):
    exit_code = 1


class ConfigError(BevAlignError):
    """Invalid configuration, shape or channel mismatch."""

    exit_code = 2


class ArtifactIOError(BevAlignError):
    exit_code = 3

    def __init__(self, message: str, path: str | None = None) -> None:
        super().__init__(f"{message}: {path}" if path else message)
        self.path = path


class NumericalError(BevAlignError):
    """Non-finite values where a finite result is required."""

    exit_code = 4
