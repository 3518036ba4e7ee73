"""Exception types shared across the package."""

from __future__ import annotations


class QclError(Exception):
    """Base class for package errors."""


class BoundaryPointError(QclError):
    """A point landed exactly on a partition boundary of a piecewise map."""


class DegenerateTwistError(QclError):
    """Twisted pullback normalizer collapsed; theta is outside the usable window."""


class RateWindowError(QclError):
    """Requested deviation size lies beyond the computed moment-function window."""


class DegenerateVarianceError(QclError):
    """Asymptotic variance below the degeneracy threshold; verification refused."""

    def __init__(self, sigma2: float, threshold: float):
        self.sigma2 = sigma2
        self.threshold = threshold
        super().__init__(
            f"degenerate variance: sigma2={sigma2:.6g} < threshold={threshold:.6g}"
        )


class AperiodicityRefusal(QclError):
    """Aperiodicity diagnostic failed; local-CLT verification refused."""

    def __init__(self, failing_t):
        self.failing_t = list(failing_t)
        super().__init__(f"aperiodicity diagnostic failed at t={self.failing_t}")


class FrameDegeneracyError(QclError):
    """Orthonormal frame lost rank during cocycle iteration."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"frame rank loss at step {step}")


class ConfigError(QclError):
    """Invalid experiment configuration, with the offending field named."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"[{field}] {message}")
