"""
Error types for the DCLP predictor pipeline.
Every failure carries the process exit code the command-line entry point should return.
"""

from typing import Optional


class DCLPError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 4


class ConfigError(DCLPError):
    """Invalid or incomplete run configuration."""

    exit_code = 2

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class ArtifactError(DCLPError):
    """Checkpoint, table or config artifacts that do not fit together."""

    exit_code = 3


class NumericError(DCLPError):
    """Non-finite loss or gradient."""

    exit_code = 4

    def __init__(self, message: str, block: Optional[str] = None):
        self.block = block
        super().__init__(f"{message} (parameter block '{block}')" if block else message)


class RuntimeFailure(DCLPError):
    """A pipeline stage failed for a reason that is not one of the above."""


class GraphError(DCLPError, ValueError):
    """A cell graph is the wrong format or invalid for the requested operation."""


class AugmentationError(DCLPError):
    """No legal augmentation step exists."""


class DegenerateGraphError(DCLPError, ValueError):
    """A graph without edges reached the difficulty computation."""


class SizeBoundError(DCLPError, ValueError):
    """Input is larger than an exhaustive routine can handle."""


class SamplingError(DCLPError):
    """Rejection sampling or mutation ran out of attempts or candidates."""


class SpaceExhaustedError(SamplingError):
    """The search space has no unseen architecture left to sample."""


class MissingArchitectureError(DCLPError, KeyError):
    """An architecture is not stored in the benchmark table."""

    def __init__(self, digest: str):
        self.digest = digest
        super().__init__(f"architecture {digest} is not in the benchmark table")

    def __str__(self) -> str:
        return self.args[0]


class TableParseError(DCLPError):
    """A benchmark table file could not be parsed."""

    def __init__(self, path: str, line: int, message: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class DuplicateRecordError(DCLPError):
    """Two table records describe isomorphic cells."""

    def __init__(self, path: str, digest: str, first_line: int, line: int):
        self.digest = digest
        self.first_line = first_line
        self.line = line
        super().__init__(
            f"{path}:{line}: duplicate architecture {digest[:12]} (first seen on line {first_line})"
        )
