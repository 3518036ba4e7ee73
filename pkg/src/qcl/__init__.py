"""Numerical laboratory for quenched limit theorems of random hyperbolic
torus maps: transfer-operator cocycles on a grid, twisted growth rates,
variance and rate-function estimation, and Monte-Carlo verification of the
large-deviation, central-limit, and local central-limit behavior."""

from .dynamics import (HyperbolicMap, MapFamily, Observable, ObservableTerm,
                       OmegaPath, PiecewisePiece, ShearTerm, SkewState,
                       apply_map, birkhoff_sum, compose, map_jacobian_det,
                       sigma_shift, skew_step)
from .errors import (AperiodicityRefusal, BoundaryPointError, ConfigError,
                     DegenerateTwistError, DegenerateVarianceError,
                     FrameDegeneracyError, QclError, RateWindowError)
from .montecarlo import (CLTReport, LCLTReport, LDPReport, SamplePlan,
                         empirical_variance, sample_mu_omega, verify_clt,
                         verify_ldp, verify_lclt)
from .operator import (DensityVector, LyapunovReport, UlamCocycle, UlamGrid,
                       UlamMatrix, build_twisted, build_ulam,
                       equivariant_density, lasota_yorke_probe,
                       lyapunov_spectrum, pullback_decay_profile)
from .spectral import (AperiodicityReport, MomentFunction, RateFunction,
                       ThetaGrid, aperiodicity_diagnostic, lambda_fiber_eigen,
                       lambda_theta_montecarlo, lambda_theta_operator,
                       moment_function_operator, rate_function,
                       twisted_lasota_yorke_probe, variance_from_lambda,
                       variance_series)

__version__ = "0.1.0"
