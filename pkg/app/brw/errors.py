from typing import Dict


class DomainError(ValueError):
    """Argument lies outside the domain of the requested function."""


class CalibrationError(ValueError):
    """The standing constraints cannot be met for the requested parameters."""

    def __init__(self, message: str, residuals: Dict[str, float] | None = None):
        super().__init__(message)
        self.residuals = residuals or {}


class TailFitError(ValueError):
    """Too few samples fall in the requested fit range."""


class ConfigError(ValueError):
    """Experiment configuration is malformed or violates a precondition."""


class EstimationError(RuntimeError):
    """Monte Carlo estimation produced an unusable result (e.g. too many capped replicas)."""


class SamplerError(RuntimeError):
    """A tabulated sampler could not be normalized."""


class ResourceError(RuntimeError):
    """Simulation exceeded its node budget; carries the partial counters."""

    def __init__(self, message: str, partial: Dict[str, float] | None = None):
        super().__init__(message)
        self.partial = partial or {}
