"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class MulticurveError(Exception):
    """Base class for all package errors."""


class ConfigError(MulticurveError, ValueError):
    """Malformed input: parameters, contracts, configuration documents."""


class InvalidParams(ConfigError):
    """A model parameter violates one of its constraints."""

    def __init__(self, constraint: str, message: str):
        self.constraint = constraint
        super().__init__(f"{constraint}: {message}")


class InvalidConfig(ConfigError):
    """A simulation, quadrature or run configuration is invalid."""


class NumericalError(MulticurveError, ArithmeticError):
    """Base class for failures of a numerical procedure."""


class RiccatiExplosion(NumericalError):
    """The Riccati solution of a square-root factor blew up before reaching ``t``."""

    def __init__(self, factor: int, time: float):
        self.factor = factor
        self.time = time
        super().__init__(f"Riccati solution of factor {factor} explodes at t={time:.6g}")


class NonFinite(NumericalError):
    """A numerical routine produced NaN/inf or failed to converge."""


class StripViolation(NumericalError):
    """The forward MGF is not finite at the requested damping parameter."""


class QuadratureNotConverged(NumericalError):
    """Fourier quadrature did not settle when the node count was doubled."""


class NotConverged(NumericalError):
    """A calibration stage failed to converge."""


class InsufficientData(ConfigError):
    """Too few quotes for the requested calibration stage."""
