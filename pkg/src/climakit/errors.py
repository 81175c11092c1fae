"""Exception taxonomy shared across the toolkit.

The CLI maps these onto exit codes: configuration problems exit 2, data
problems exit 3, backend/transport problems exit 5. Validation findings are
reported as values, not exceptions, and exit 4 at the CLI layer.
"""

from __future__ import annotations


class ToolkitError(Exception):
    """Base class for all toolkit-raised errors."""


class ConfigError(ToolkitError):
    """Invalid configuration: bad schema file, bad option value, bad quota table."""


class DataError(ToolkitError):
    """Invalid or missing input data."""


class UnknownClassIdError(DataError):
    """A semantic map contains a class id absent from its schema."""


class EmptyRegionError(DataError):
    """A region extraction or region-dependent statistic found no pixels."""


class InfeasibleConfigError(ToolkitError):
    """The sampler could not satisfy its constraints within the attempt budget."""


class ZeroVarianceError(ToolkitError):
    """A correlation was requested over a constant sequence."""


class DegenerateClassError(ToolkitError):
    """A ranking metric was requested but one of the two classes has no pixels."""


class DimensionMismatchError(DataError):
    """Two grids that must share dimensions do not."""


class InfeasibleQuotaError(DataError):
    """Curation quotas exceed per-cell availability.

    Attributes:
        shortfalls: list of (cell, available, requested) tuples, one per
            infeasible cell, where cell is a (scene, weather) pair.
    """

    def __init__(self, shortfalls: list[tuple[tuple[str, str], int, int]]):
        self.shortfalls = list(shortfalls)
        lines = ", ".join(
            f"{scene}/{weather}: have {avail}, need {req}"
            for (scene, weather), avail, req in self.shortfalls
        )
        super().__init__(f"quota infeasible for {len(self.shortfalls)} cell(s): {lines}")


class TransportError(ToolkitError):
    """The generation service could not be reached or dropped the connection."""


class ServiceTimeout(TransportError):
    """The generation service did not answer within the deadline."""


class BackendError(ToolkitError):
    """The generation service answered with a structured error reply."""

    def __init__(self, code: str, message: str):
        self.code = str(code)
        self.message = message
        super().__init__(f"backend error {self.code}: {message}")


class EditLeakageError(ToolkitError):
    """An inpainting reply modified pixels outside the permitted edit region."""
