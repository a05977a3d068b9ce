"""Named error conditions.

Every error carries the module it was raised from and the offending
parameter so the CLI can write a machine-readable record.
"""

from __future__ import annotations


class OpenEvtError(Exception):
    """Base class for all named errors."""

    module = "openevt"

    def __init__(self, message: str, parameter: str | None = None, **details):
        super().__init__(message)
        self.parameter = parameter
        self.details = details

    def record(self) -> dict:
        rec = {
            "name": type(self).__name__,
            "module": self.module,
            "parameter": self.parameter,
            "message": str(self),
        }
        if self.details:
            rec["details"] = {k: _jsonable(v) for k, v in self.details.items()}
        return rec


def _jsonable(v):
    if isinstance(v, (int, float, str, bool)) or v is None:
        return v
    return repr(v)


# interval_maps
class AmbiguousPointError(OpenEvtError):
    """A point sits on (or within tolerance of) a branch boundary."""

    module = "interval_maps"


# ulam
class UnsupportedModeError(OpenEvtError):
    module = "ulam"


class DiscretizationToleranceError(OpenEvtError):
    module = "ulam"


class ConvergenceError(OpenEvtError):
    module = "ulam"

    def __init__(self, message, parameter=None, residual=float("nan"), **details):
        super().__init__(message, parameter, residual=residual, **details)
        self.residual = residual


class InconsistentClassificationError(OpenEvtError):
    module = "ulam"


# open_dynamics
class EmptyDensityError(OpenEvtError):
    module = "open_dynamics"


class InsufficientSurvivorsError(OpenEvtError):
    module = "open_dynamics"


class InfeasibleHorizonError(OpenEvtError):
    module = "open_dynamics"


# extremes
class OffSupportError(OpenEvtError):
    module = "extremes"


class BallTooLargeError(OpenEvtError):
    module = "extremes"


class FormulaDomainError(OpenEvtError):
    module = "extremes"


class ClassificationMismatchError(OpenEvtError):
    module = "extremes"


# gev_fit
class InsufficientDataError(OpenEvtError):
    module = "gev_fit"


class DegenerateSampleError(OpenEvtError):
    module = "gev_fit"


# cli
class ConfigError(OpenEvtError):
    module = "cli"


class PipelineRefusedError(OpenEvtError):
    """A requested pipeline is not applicable to the configured system."""

    module = "cli"
