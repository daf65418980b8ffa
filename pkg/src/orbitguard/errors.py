"""Error taxonomy shared across the package.

Everything derives from ValueError so callers that only care about "bad
input" can catch one type; specific subclasses carry intent.
"""

from __future__ import annotations


class OrbitGuardError(ValueError):
    """Base class for all package errors."""


class DomainError(OrbitGuardError):
    """State, command, or parameter outside the physical domain."""


class ConfigError(OrbitGuardError):
    """Malformed scenario / pipeline / gateway configuration."""


class CatalogError(OrbitGuardError):
    """Unknown constraint id or inconsistent catalog entry."""


class ModeError(OrbitGuardError):
    """Operation not defined for the constraint's mode or degree."""


class PolicyError(OrbitGuardError):
    """Policy specification or runtime policy failure."""


class WeightsFileError(OrbitGuardError):
    """Neural-policy weights file rejected; message carries the line."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SolverStallError(OrbitGuardError):
    """Active-set QP exceeded its iteration cap."""


class DegenerateRowError(OrbitGuardError):
    """Barrier row has a vanishing control direction while violated."""


class ScenarioError(ConfigError):
    """Scenario file failed validation; message lists field paths."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class TelemetryError(OrbitGuardError):
    """Telemetry file unreadable, wrong schema, or malformed frame."""


class ProtocolError(OrbitGuardError):
    """Gateway wire message violates the framing or envelope rules."""
