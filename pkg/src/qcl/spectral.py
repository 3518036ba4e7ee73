"""Spectral statistics of the twisted cocycle.

The growth rate of the twisted cocycle acts as the quenched log-moment
generating function of Birkhoff sums: its Birkhoff-averaged fiber
eigenvalue logs give the moment function, the second derivative at zero is
the asymptotic variance, and its Legendre transform is the large-deviation
rate function. Imaginary twists feed the aperiodicity diagnostics that
gate the local CLT.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from . import montecarlo
from .dynamics import MapFamily, Observable, OmegaPath
from .errors import DegenerateTwistError, RateWindowError
from .montecarlo import SamplePlan
from .operator import (DensityVector, LYFit, UlamCocycle,
                       lasota_yorke_probe, leading_eigenvalue_modulus)

_NORMALIZER_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# grids and containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ThetaGrid:
    """Real twist grid (symmetric, containing 0) plus an imaginary t rail."""

    real_values: tuple[float, ...]
    imag_values: tuple[float, ...] = ()

    def __post_init__(self):
        vals = np.asarray(self.real_values)
        if 0.0 not in self.real_values:
            raise ValueError("theta grid must contain 0")
        if np.abs(np.sort(vals) + np.sort(vals)[::-1]).max() > 1e-12:
            raise ValueError("real theta grid must be symmetric about 0")

    @classmethod
    def build(cls, theta_max: float, n_real: int = 21, fd_step: float = 0.02,
              t_values: Sequence[float] = ()) -> "ThetaGrid":
        if theta_max <= 0:
            raise ValueError("theta_max must be positive")
        base = np.linspace(-theta_max, theta_max, n_real)
        stencil = np.array([fd_step / 2, fd_step, 2 * fd_step])
        # snap to 12 decimals so linspace points and stencil points that
        # should coincide cannot survive as near-duplicates
        vals = np.unique(np.round(
            np.concatenate([base, stencil, -stencil, [0.0]]), 12))
        return cls(real_values=tuple(float(v) for v in vals),
                   imag_values=tuple(float(t) for t in t_values))


@dataclass
class MomentFunction:
    """Estimated growth-rate curve over the real twist grid."""

    theta: np.ndarray
    values: np.ndarray
    std_err: np.ndarray
    method: str

    def __post_init__(self):
        order = np.argsort(self.theta)
        self.theta = np.asarray(self.theta, dtype=float)[order]
        self.values = np.asarray(self.values, dtype=float)[order]
        self.std_err = np.asarray(self.std_err, dtype=float)[order]

    def value_at(self, theta: float) -> float:
        i = int(np.argmin(np.abs(self.theta - theta)))
        if abs(self.theta[i] - theta) > 1e-12:
            raise KeyError(f"theta={theta} not on the grid")
        return float(self.values[i])

    def stderr_at(self, theta: float) -> float:
        i = int(np.argmin(np.abs(self.theta - theta)))
        return float(self.std_err[i])

    def second_differences(self) -> np.ndarray:
        th, v = self.theta, self.values
        return np.array([
            (v[i + 1] - v[i]) / (th[i + 1] - th[i])
            - (v[i] - v[i - 1]) / (th[i] - th[i - 1])
            for i in range(1, len(th) - 1)
        ])

    def convexity_defect(self, tol_mult: float = 3.0) -> float:
        """Most negative allowed-noise-adjusted second difference (>= 0 is convex)."""
        sd = self.second_differences()
        tol = tol_mult * self.std_err[1:-1]
        return float((sd + tol).min())

    def max_window_eps(self) -> float:
        """Largest deviation size identifiable from this grid (right slope)."""
        th, v = self.theta, self.values
        return float((v[-1] - v[-2]) / (th[-1] - th[-2]))


@dataclass
class RateFunction:
    """Legendre transform of the convexified moment function."""

    eps: np.ndarray
    c: np.ndarray
    theta_star: np.ndarray
    window_max_eps: float

    def value(self, eps: float) -> float:
        i = int(np.argmin(np.abs(self.eps - eps)))
        if abs(self.eps[i] - eps) > 1e-9:
            return float(np.interp(eps, self.eps, self.c))
        return float(self.c[i])


@dataclass
class AperiodicityReport:
    """Per-t decay slopes of the imaginary-twisted cocycle and periodic-path radii."""

    t_values: np.ndarray
    slopes: np.ndarray
    radii: np.ndarray
    verdicts: np.ndarray
    slope_threshold: float
    radius_threshold: float
    n: int

    @property
    def all_pass(self) -> bool:
        return bool(self.verdicts.all())

    def failing_t(self) -> list[float]:
        return [float(t) for t, v in zip(self.t_values, self.verdicts) if not v]

    def to_rows(self) -> list[dict]:
        return [{"t": float(t), "slope": float(s), "radius": float(r),
                 "verdict": bool(v)}
                for t, s, r, v in zip(self.t_values, self.slopes, self.radii,
                                      self.verdicts)]


@dataclass
class VarianceSeries:
    """Autocovariance series of the observable over the skew product."""

    terms: np.ndarray        # c_0, c_1, ..., c_{n_max}
    cumulative: np.ndarray   # c_0 + 2 sum_{j<=m} c_j
    value: float
    std_err: float
    n_max: int
    n_samples: int


# ---------------------------------------------------------------------------
# fiber eigenvalues and the moment function
# ---------------------------------------------------------------------------

def _twisted_pullback(cocycle: UlamCocycle, omega: OmegaPath, theta: complex,
                      n_pullback: int) -> np.ndarray:
    """Normalized twisted pullback of uniform, mass one at the target fiber."""
    cplx = bool(complex(theta).imag)
    v = np.full(cocycle.grid.n_cells, 1.0 / cocycle.grid.n_cells,
                dtype=np.complex128 if cplx else np.float64)
    for d in range(n_pullback, 0, -1):
        v = cocycle.push_op(omega.symbol(-d), theta) @ v
        mass = v.sum()
        if abs(mass) < _NORMALIZER_FLOOR:
            raise DegenerateTwistError(
                f"pullback normalizer collapsed at theta={theta}")
        v = v / mass
    return v


def lambda_fiber_eigen(cocycle: UlamCocycle, omega: OmegaPath, theta: complex,
                       n_pullback: int = 50) -> tuple[complex, DensityVector]:
    """Fiber eigenvalue and eigen-density of the twisted matrix cocycle.

    The density is the normalized twisted pullback; the eigenvalue is the
    mass its one-step image acquires. At theta = 0 the matrices are
    row-stochastic so the mass ratio is identically one; the algebraic
    value is returned rather than its rounded float accumulation.
    """
    if n_pullback < 1:
        raise ValueError("need at least one pullback step")
    v = _twisted_pullback(cocycle, omega, theta, n_pullback)
    if theta == 0:
        return 1.0, DensityVector(cocycle.grid, v)
    lam = (cocycle.push_op(omega.symbol(0), theta) @ v).sum()
    if abs(lam) < _NORMALIZER_FLOOR:
        raise DegenerateTwistError(f"fiber eigenvalue collapsed at theta={theta}")
    lam = complex(lam)
    return (lam if lam.imag else lam.real), DensityVector(cocycle.grid, v)


def lambda_theta_operator(cocycle: UlamCocycle, omega: OmegaPath, theta: complex,
                          n_fibers: int = 200, n_pullback: int = 50,
                          batch_count: int = 10) -> tuple[float, float]:
    """Birkhoff average of fiber eigenvalue logs: the operator moment estimate.

    Mass conservation makes every untwisted fiber eigenvalue exactly one,
    so the value at theta = 0 is exactly zero.
    """
    if n_fibers < 10:
        raise ValueError("need at least 10 fibers for the Birkhoff average")
    if theta == 0:
        return 0.0, 0.0
    v = _twisted_pullback(cocycle, omega, theta, n_pullback)
    logs = np.empty(n_fibers)
    for i in range(n_fibers):
        v = cocycle.push_op(omega.symbol(i), theta) @ v
        mass = v.sum()
        if abs(mass) < _NORMALIZER_FLOOR:
            raise DegenerateTwistError(f"fiber eigenvalue collapsed at theta={theta}")
        logs[i] = np.log(abs(mass))
        v = v / mass
    usable = n_fibers - (n_fibers % batch_count)
    se = montecarlo._batch_stderr(logs[:usable], batch_count)
    return float(logs.mean()), se


def moment_function_operator(cocycle: UlamCocycle, omega: OmegaPath,
                             grid: ThetaGrid, n_fibers: int = 200,
                             n_pullback: int = 50, batch_count: int = 10,
                             mapper=map) -> MomentFunction:
    """Operator moment function over the real twist grid."""
    def one(theta):
        return lambda_theta_operator(cocycle, omega, theta, n_fibers,
                                     n_pullback, batch_count)
    results = list(mapper(one, grid.real_values))
    return MomentFunction(
        theta=np.asarray(grid.real_values),
        values=np.array([r[0] for r in results]),
        std_err=np.array([r[1] for r in results]),
        method="operator")


def lambda_theta_montecarlo(family: MapFamily, g: Observable, omega: OmegaPath,
                            theta: float, n: int, plan: SamplePlan
                            ) -> tuple[float, float]:
    """Direct estimate from exponential moments of sampled Birkhoff sums.

    Accumulated as a max-shifted log-sum so large twists cannot overflow.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    x = montecarlo.sample_mu_omega(family, omega, plan)
    s_n = montecarlo.birkhoff_sums(family, g, omega, x, n)[n]
    val = float((logsumexp(theta * s_n) - np.log(plan.n_samples)) / n)
    per_batch = [
        float((logsumexp(theta * b) - np.log(b.size)) / n)
        for b in s_n.reshape(plan.batch_count, -1)
    ]
    se = (float(np.std(per_batch, ddof=1) / np.sqrt(plan.batch_count))
          if plan.batch_count > 1 else 0.0)
    return val, se


# ---------------------------------------------------------------------------
# variance estimators
# ---------------------------------------------------------------------------

def variance_series(family: MapFamily, g: Observable, proto: OmegaPath,
                    n_max: int, plan: SamplePlan,
                    time_origins: int = 32) -> VarianceSeries:
    """Truncated autocovariance series over the skew product.

    Sigma^2 ~= E[g^2] + 2 sum_{j=1}^{n_max} E[g (g o tau^j)]. Expectations
    are sampled by an ensemble of independent (path, point) pairs, each lag
    additionally averaged over time_origins starting points along the
    trajectory (the invariance of the skew-product measure makes every
    origin an equally valid sample; averaging shrinks the series noise).
    """
    if n_max < 1:
        raise ValueError("need n_max >= 1")
    if time_origins < 1:
        raise ValueError("need at least one time origin")
    series = montecarlo.skew_g_series(family, g, proto,
                                      n_max + time_origins - 1, plan)
    lag0 = series[:time_origins]
    terms = np.empty(n_max + 1)
    per_sample = np.zeros(plan.n_samples)
    for j in range(n_max + 1):
        prods = lag0 * series[j:j + time_origins]
        terms[j] = prods.mean()
        per_sample += (2.0 if j else 1.0) * prods.mean(axis=0)
    cumulative = terms[0] + 2.0 * np.cumsum(np.concatenate([[0.0], terms[1:]]))
    se = montecarlo._batch_stderr(per_sample, plan.batch_count)
    return VarianceSeries(terms=terms, cumulative=cumulative,
                          value=float(cumulative[-1]), std_err=se,
                          n_max=n_max, n_samples=plan.n_samples)


def variance_from_lambda(moment: MomentFunction, h: float = 0.02
                         ) -> tuple[float, float]:
    """Five-point central second difference of the moment function at zero."""
    try:
        stencil = [moment.value_at(t) for t in (-2 * h, -h, 0.0, h, 2 * h)]
        errs = [moment.stderr_at(t) for t in (-2 * h, -h, 0.0, h, 2 * h)]
    except KeyError as exc:
        raise ValueError(f"theta grid too coarse for step h={h}: {exc}") from exc
    coef = np.array([-1.0, 16.0, -30.0, 16.0, -1.0])
    sigma2 = float(coef @ stencil / (12.0 * h * h))
    se = float(np.sqrt(np.sum((coef * errs) ** 2)) / (12.0 * h * h))
    return sigma2, se


# ---------------------------------------------------------------------------
# rate function
# ---------------------------------------------------------------------------

def _pava_nondecreasing(y: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Pool-adjacent-violators projection onto nondecreasing sequences."""
    y = list(map(float, y))
    w = list(map(float, w))
    vals, wts, sizes = [], [], []
    for yi, wi in zip(y, w):
        vals.append(yi)
        wts.append(wi)
        sizes.append(1)
        while len(vals) > 1 and vals[-2] > vals[-1]:
            v = (vals[-2] * wts[-2] + vals[-1] * wts[-1]) / (wts[-2] + wts[-1])
            wts[-2] += wts[-1]
            sizes[-2] += sizes[-1]
            vals[-2] = v
            vals.pop()
            wts.pop()
            sizes.pop()
    out = []
    for v, s in zip(vals, sizes):
        out.extend([v] * s)
    return np.asarray(out)


def convexify(moment: MomentFunction) -> tuple[np.ndarray, np.ndarray]:
    """Project the moment values onto a convex curve anchored at zero.

    Slopes are isotonically regressed (weights = grid spacing) and the curve
    is rebuilt outward from theta = 0, keeping the exact zero there.
    """
    th, v = moment.theta, moment.values
    dth = np.diff(th)
    slopes = _pava_nondecreasing(np.diff(v) / dth, dth)
    i0 = int(np.argmin(np.abs(th)))
    out = np.zeros_like(v)
    for i in range(i0, len(th) - 1):
        out[i + 1] = out[i] + slopes[i] * dth[i]
    for i in range(i0 - 1, -1, -1):
        out[i] = out[i + 1] - slopes[i] * dth[i]
    return th, out


def rate_function(moment: MomentFunction, eps_grid: Sequence[float],
                  refine: int = 64) -> RateFunction:
    """Legendre transform c(eps) = sup_{theta >= 0} (theta eps - Lambda(theta)).

    Works on the convexified moment curve with piecewise-linear
    interpolation refined between grid nodes. Deviation sizes beyond the
    right slope of the window are rejected.
    """
    th, lam = convexify(moment)
    pos = th >= 0.0
    th_p, lam_p = th[pos], lam[pos]
    window_max = float((lam_p[-1] - lam_p[-2]) / (th_p[-1] - th_p[-2]))
    eps_arr = np.asarray(list(eps_grid), dtype=float)
    if np.any(eps_arr < 0):
        raise ValueError("rate function window covers nonnegative eps only")
    bad = eps_arr[eps_arr > window_max]
    if bad.size:
        raise RateWindowError(
            f"eps {bad.tolist()} beyond the identifiable window "
            f"(max slope {window_max:.6g}); extend the theta grid")
    dense = np.linspace(th_p[0], th_p[-1], refine * (len(th_p) - 1) + 1)
    lam_dense = np.interp(dense, th_p, lam_p)
    obj = eps_arr[:, None] * dense[None, :] - lam_dense[None, :]
    idx = np.argmax(obj, axis=1)
    return RateFunction(eps=eps_arr,
                        c=np.maximum(obj[np.arange(len(eps_arr)), idx], 0.0),
                        theta_star=dense[idx], window_max_eps=window_max)


# ---------------------------------------------------------------------------
# aperiodicity diagnostics
# ---------------------------------------------------------------------------

def aperiodicity_diagnostic(cocycle: UlamCocycle, omega: OmegaPath,
                            t_values: Sequence[float], n: int = 60,
                            slope_threshold: float = -1e-3,
                            radius_threshold: float = 1e-3,
                            mapper=map) -> AperiodicityReport:
    """Imaginary-twist decay rates along the path and at the periodic path.

    For each t: (a) the worst-case slope of the log L1 norm of the twisted
    cocycle applied to a small basis of start densities, and (b) the
    spectral radius of the twisted matrix at the constant path (period-one
    diagnostic point). Passing needs slope < slope_threshold and
    radius < 1 - radius_threshold.
    """
    if n < 20:
        raise ValueError("need n >= 20 for a stable slope fit")
    t_values = np.asarray(list(t_values), dtype=float)
    if np.any(t_values == 0.0):
        raise ValueError("t grid must not contain 0")
    n_cells = cocycle.grid.n_cells
    centers = cocycle.grid.centers()
    starts = [np.full(n_cells, 1.0 / n_cells, dtype=np.complex128)]
    for fx, fy in ((1, 0), (0, 1)):
        w = (1.0 + 0.5 * np.cos(2 * np.pi * (fx * centers[0] + fy * centers[1])))
        starts.append((w / w.sum()).astype(np.complex128))

    def probe(t: float) -> tuple[float, float]:
        worst = -np.inf
        for v0 in starts:
            v = v0.copy()
            acc = 0.0
            logs = np.empty(n)
            for m in range(n):
                v = cocycle.push_op(omega.symbol(m), 1j * t) @ v
                nrm = np.abs(v).sum()
                acc += np.log(nrm)
                logs[m] = acc
                v = v / nrm
            res = stats.linregress(np.arange(3, n + 1, dtype=float), logs[2:])
            worst = max(worst, float(res.slope))
        # period-one diagnostic point: the constant path driving symbol 0
        radius = leading_eigenvalue_modulus(cocycle.matrix(0, 1j * t).matrix)
        return worst, radius

    results = list(mapper(probe, t_values))
    slopes = np.array([r[0] for r in results])
    radii = np.array([r[1] for r in results])
    verdicts = (slopes < slope_threshold) & (radii < 1.0 - radius_threshold)
    return AperiodicityReport(t_values=t_values, slopes=slopes, radii=radii,
                              verdicts=verdicts, slope_threshold=slope_threshold,
                              radius_threshold=radius_threshold, n=n)


def twisted_lasota_yorke_probe(cocycle: UlamCocycle, omega: OmegaPath, t: float,
                               n_grid: Sequence[int], k_coarse: int) -> LYFit:
    """Strong/weak norm inequality fit for the imaginary-twisted cocycle."""
    return lasota_yorke_probe(cocycle, omega, n_grid, k_coarse, theta=1j * t)


def twisted_lasota_yorke_sweep(cocycle: UlamCocycle, omega: OmegaPath,
                               t_values: Sequence[float],
                               n_grid: Sequence[int], k_coarse: int) -> dict:
    """Fits over a t window plus their suprema (boundedness check)."""
    fits = {float(t): twisted_lasota_yorke_probe(cocycle, omega, t, n_grid,
                                                 k_coarse)
            for t in t_values}
    return {
        "fits": fits,
        "sup_strong_coef": max(f.strong_coef for f in fits.values()),
        "sup_weak_coef": max(f.weak_coef for f in fits.values()),
        "sup_rate": max(f.rate for f in fits.values()),
        "all_ok": all(f.ok for f in fits.values()),
    }
