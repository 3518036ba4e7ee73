"""Sampling from the quenched fiber measures and empirical limit-theorem checks.

Fiber measures are sampled by pushing Lebesgue draws forward from a shifted
fiber (burn_in steps); for volume-preserving families burn_in = 0 is exact.
Every draw is keyed by (seed, sample index), so reports are reproducible for
any worker count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .dynamics import MapFamily, Observable, OmegaPath
from .errors import AperiodicityRefusal, DegenerateVarianceError
from .seeding import derive_key, uniform

DEFAULT_VARIANCE_FLOOR = 0.01


@dataclass(frozen=True)
class SamplePlan:
    """Monte-Carlo budget for one verification run."""

    seed: int
    n_samples: int
    burn_in: int = 0
    n_steps: int = 1000
    batch_count: int = 10

    def __post_init__(self):
        if self.n_samples < 100:
            raise ValueError("need at least 100 samples")
        if self.burn_in < 0:
            raise ValueError("burn_in must be nonnegative")
        if self.batch_count < 1 or self.n_samples % self.batch_count:
            raise ValueError("batch_count must evenly divide n_samples")


# ---------------------------------------------------------------------------
# sampling engines
# ---------------------------------------------------------------------------

def _resample_off_boundary(family: MapFamily, symbol: int, x: np.ndarray,
                           key: int, salt: int) -> int:
    """Replace points sitting on a partition boundary; returns the count."""
    m = family[symbol]
    bad = m.boundary_mask(x)
    rejected = 0
    attempt = 0
    while np.any(bad):
        attempt += 1
        idx = np.nonzero(bad)[0]
        x[0, idx] = uniform(key, idx, salt + 2 * attempt)
        x[1, idx] = uniform(key, idx, salt + 2 * attempt + 1)
        rejected += len(idx)
        bad = m.boundary_mask(x)
        if attempt > 64:
            raise RuntimeError("could not move samples off the partition boundary")
    return rejected


def sample_mu_omega(family: MapFamily, omega: OmegaPath, plan: SamplePlan,
                    return_rejections: bool = False):
    """Draw plan.n_samples points approximately distributed as the fiber measure.

    Lebesgue draws are pushed forward burn_in steps from the shifted fiber;
    boundary points of piecewise maps are rejected and resampled (counted).
    """
    key = derive_key(plan.seed, "mu_omega")
    ids = np.arange(plan.n_samples, dtype=np.int64)
    x = np.stack((uniform(key, ids, 0), uniform(key, ids, 1)))
    rejected = 0
    past = omega.shifted(-plan.burn_in)
    for i in range(plan.burn_in):
        a = past.symbol(i)
        # salt block of width 2 * (max retries + 1) per step, disjoint from
        # the coordinate counters 0 and 1
        rejected += _resample_off_boundary(family, a, x, key, 1000 + 256 * i)
        x = family[a].apply(x)
    if return_rejections:
        return x, rejected
    return x


class _FusedStepper:
    """Allocation-free accumulate-and-step kernel for smooth map families.

    Flattens per-symbol observable terms and shear parameters once and
    reuses scratch buffers across steps; large ensembles spend their time
    in the trig calls instead of temporary arrays.
    """

    def __init__(self, family: MapFamily, g: Observable, n_points: int):
        two_pi = 2.0 * np.pi
        self.symbols = []
        for a in range(len(family)):
            m = family[a]
            terms = [(two_pi * t.freq[0], two_pi * t.freq[1],
                      t.cos_coeff, t.sin_coeff) for t in g.terms[a]]
            shears = [(two_pi * s.freq[0], two_pi * s.freq[1],
                       s.amplitude * s.vec[0], s.amplitude * s.vec[1])
                      for s in m.shears if s.amplitude != 0.0]
            self.symbols.append((m.base_matrix, terms, shears,
                                 g.offsets[a]))
        self.ph = np.empty(n_points)
        self.tmp = np.empty(n_points)
        self.y0 = np.empty(n_points)
        self.y1 = np.empty(n_points)

    def _phase(self, w0, w1, x0, x1):
        ph, tmp = self.ph, self.tmp
        if w0 != 0.0 and w1 != 0.0:
            np.multiply(x0, w0, out=ph)
            np.multiply(x1, w1, out=tmp)
            ph += tmp
        elif w0 != 0.0:
            np.multiply(x0, w0, out=ph)
        else:
            np.multiply(x1, w1, out=ph)
        return ph

    def step(self, a: int, x: np.ndarray, total: np.ndarray) -> None:
        """total += g_a(x); x <- T_a(x), both in place."""
        base, terms, shears, offset = self.symbols[a]
        tmp = self.tmp
        if offset != 0.0:
            total -= offset
        for w0, w1, c, s in terms:
            ph = self._phase(w0, w1, x[0], x[1])
            if c != 0.0:
                np.cos(ph, out=tmp)
                if c != 1.0:
                    tmp *= c
                total += tmp
            if s != 0.0:
                np.sin(ph, out=tmp)
                if s != 1.0:
                    tmp *= s
                total += tmp
        y0, y1 = self.y0, self.y1
        np.multiply(x[0], float(base[0][0]), out=y0)
        np.multiply(x[1], float(base[0][1]), out=tmp)
        y0 += tmp
        np.multiply(x[0], float(base[1][0]), out=y1)
        np.multiply(x[1], float(base[1][1]), out=tmp)
        y1 += tmp
        for w0, w1, av0, av1 in shears:
            ph = self._phase(w0, w1, y0, y1)
            np.sin(ph, out=tmp)
            if av0 != 0.0 and av1 != 0.0:
                np.multiply(tmp, av0, out=ph)  # ph already consumed by sin
                y0 += ph
                tmp *= av1
                y1 += tmp
            elif av0 != 0.0:
                tmp *= av0
                y0 += tmp
            else:
                tmp *= av1
                y1 += tmp
        np.mod(y0, 1.0, out=x[0])
        np.mod(y1, 1.0, out=x[1])


def birkhoff_sums(family: MapFamily, g: Observable, omega: OmegaPath,
                  x0: np.ndarray, n: int,
                  checkpoints: Optional[Sequence[int]] = None) -> dict[int, np.ndarray]:
    """Birkhoff sums over an ensemble, optionally snapshotted at checkpoints.

    Returns {m: S_m} for m in checkpoints (default {n: S_n}).
    """
    if checkpoints is None:
        checkpoints = [n]
    marks = sorted(set(int(c) for c in checkpoints))
    if marks and (marks[0] < 0 or marks[-1] > n):
        raise ValueError("checkpoints must lie in [0, n]")
    x = np.array(x0, dtype=np.float64)
    total = np.zeros(x.shape[1:], dtype=np.float64)
    out: dict[int, np.ndarray] = {}
    if marks and marks[0] == 0:
        out[0] = total.copy()
    fused = None
    if (x.ndim == 2 and x.shape[1] >= 1024
            and all(m.kind == "anosov_perturbed_cat" for m in family.maps)):
        fused = _FusedStepper(family, g, x.shape[1])
    for i in range(n):
        a = omega.symbol(i)
        if fused is not None:
            fused.step(a, x, total)
        else:
            total += g.evaluate(a, x)
            x = family[a].apply(x)
        if (i + 1) in marks:
            out[i + 1] = total.copy()
    return out


def skew_g_series(family: MapFamily, g: Observable, proto: OmegaPath,
                  n_terms: int, plan: SamplePlan) -> np.ndarray:
    """Matrix G[j, i] = g at the j-th skew-product step of ensemble member i.

    Each member carries its own driving path (i.i.d. symbols keyed by the
    sample index), so the ensemble samples the skew-product measure rather
    than a single quenched fiber.
    """
    # separate keys so the symbol stream is independent of the start points
    key_sym = derive_key(plan.seed, "skew_ensemble/symbols")
    key_x = derive_key(plan.seed, "skew_ensemble/points")
    ids = np.arange(plan.n_samples, dtype=np.int64)
    cum = np.cumsum(np.asarray(proto.distribution))
    x = np.stack((uniform(key_x, ids, 0), uniform(key_x, ids, 1)))

    def symbols_at(t: int) -> np.ndarray:
        u = uniform(key_sym, ids, t)
        return np.minimum(np.searchsorted(cum, u, side="right"),
                          len(cum) - 1)

    def apply_mixed(a_vec: np.ndarray, pts: np.ndarray) -> np.ndarray:
        out = np.empty_like(pts)
        for a in range(len(family)):
            m = a_vec == a
            if np.any(m):
                out[:, m] = family[a].apply(pts[:, m])
        return out

    for t in range(-plan.burn_in, 0):
        x = apply_mixed(symbols_at(t), x)
    series = np.empty((n_terms + 1, plan.n_samples))
    for j in range(n_terms + 1):
        a_vec = symbols_at(j)
        for a in range(len(family)):
            m = a_vec == a
            if np.any(m):
                series[j, m] = g.evaluate(a, x[:, m])
        if j < n_terms:
            x = apply_mixed(a_vec, x)
    return series


def _batch_stderr(values: np.ndarray, batch_count: int) -> float:
    batches = values.reshape(batch_count, -1).mean(axis=1)
    if batch_count < 2:
        return 0.0
    return float(batches.std(ddof=1) / np.sqrt(batch_count))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class CLTReport:
    n: int
    n_samples: int
    sigma2: float
    ks_stat: float
    batch_ks: list[float]
    seed: int

    def to_dict(self) -> dict:
        return {
            "n": self.n, "n_samples": self.n_samples, "sigma2": self.sigma2,
            "ks_stat": self.ks_stat, "batch_ks": self.batch_ks, "seed": self.seed,
        }


@dataclass
class LDPCell:
    eps: float
    n: int
    tail_count: int
    tail_prob: Optional[float]
    empirical_rate: Optional[float]
    predicted_rate: float
    required_samples: int
    flagged: bool


@dataclass
class LDPReport:
    cells: list[LDPCell]
    n_samples: int
    seed: int

    def rates_for_eps(self, eps: float) -> list[tuple[int, Optional[float]]]:
        return [(c.n, c.empirical_rate) for c in self.cells if c.eps == eps]

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples, "seed": self.seed,
            "cells": [{
                "eps": c.eps, "n": c.n, "tail_count": c.tail_count,
                "tail_prob": c.tail_prob, "empirical_rate": c.empirical_rate,
                "predicted_rate": c.predicted_rate,
                "required_samples": c.required_samples, "flagged": c.flagged,
            } for c in self.cells],
        }


@dataclass
class LCLTReport:
    n: int
    n_samples: int
    sigma2: float
    interval: tuple[float, float]
    s_values: np.ndarray
    empirical: np.ndarray     # Sigma sqrt(n) mu(s + S_n in J)
    predicted: np.ndarray     # |J| exp(-s^2 / (2 n Sigma^2)) / sqrt(2 pi)
    mc_err: np.ndarray
    seed: int

    @property
    def sup_residual(self) -> float:
        return float(np.abs(self.empirical - self.predicted).max())

    @property
    def relative_residual(self) -> float:
        scale = float(self.predicted.max())
        return self.sup_residual / scale if scale > 0 else np.inf

    def to_dict(self) -> dict:
        return {
            "n": self.n, "n_samples": self.n_samples, "sigma2": self.sigma2,
            "interval": list(self.interval),
            "s": [float(v) for v in self.s_values],
            "empirical": [float(v) for v in self.empirical],
            "predicted": [float(v) for v in self.predicted],
            "mc_err": [float(v) for v in self.mc_err],
            "sup_residual": self.sup_residual,
            "relative_residual": self.relative_residual,
            "seed": self.seed,
        }


# ---------------------------------------------------------------------------
# verifications
# ---------------------------------------------------------------------------

def verify_clt(family: MapFamily, g: Observable, omega: OmegaPath,
               plan: SamplePlan, sigma2: float,
               variance_floor: float = DEFAULT_VARIANCE_FLOOR) -> CLTReport:
    """Kolmogorov-Smirnov distance of S_n / sqrt(n) to the centered normal law.

    sigma2 must come from the spectral estimators, so the comparison is a
    genuine cross-module check; degenerate variance is refused.
    """
    if sigma2 < variance_floor:
        raise DegenerateVarianceError(sigma2, variance_floor)
    n = plan.n_steps
    x = sample_mu_omega(family, omega, plan)
    z = birkhoff_sums(family, g, omega, x, n)[n] / np.sqrt(n)
    sigma = float(np.sqrt(sigma2))
    ks = float(stats.kstest(z, "norm", args=(0.0, sigma)).statistic)
    per_batch = [
        float(stats.kstest(b, "norm", args=(0.0, sigma)).statistic)
        for b in z.reshape(plan.batch_count, -1)
    ]
    return CLTReport(n=n, n_samples=plan.n_samples, sigma2=sigma2, ks_stat=ks,
                     batch_ks=per_batch, seed=plan.seed)


def ldp_required_samples(rate_value: float, n: int, min_tail: int = 50) -> int:
    """Sample count at which the expected tail count reaches min_tail."""
    demand = min_tail * float(np.exp(min(rate_value * n, 700.0)))
    return int(min(demand, 9e18)) + 1


def verify_ldp(family: MapFamily, g: Observable, omega: OmegaPath,
               eps_list: Sequence[float], n_list: Sequence[int],
               plan: SamplePlan, rate: Callable[[float], float],
               min_tail: int = 50) -> LDPReport:
    """Empirical tail decay rates of Birkhoff sums against the rate function.

    rate maps eps to the predicted decay rate. Cells whose tail count is
    zero are flagged, never smoothed; each cell records the sample count the
    planner would require for min_tail expected hits.
    """
    n_list = sorted(set(int(n) for n in n_list))
    x = sample_mu_omega(family, omega, plan)
    sums = birkhoff_sums(family, g, omega, x, n_list[-1], checkpoints=n_list)
    cells = []
    for eps in eps_list:
        c_eps = float(rate(eps))
        for n in n_list:
            count = int(np.count_nonzero(sums[n] > n * eps))
            required = ldp_required_samples(c_eps, n, min_tail)
            if count == 0:
                cells.append(LDPCell(eps=float(eps), n=n, tail_count=0,
                                     tail_prob=None, empirical_rate=None,
                                     predicted_rate=c_eps,
                                     required_samples=required, flagged=True))
            else:
                p = count / plan.n_samples
                cells.append(LDPCell(
                    eps=float(eps), n=n, tail_count=count, tail_prob=p,
                    empirical_rate=float(-np.log(p) / n), predicted_rate=c_eps,
                    required_samples=required,
                    flagged=count < min_tail))
    return LDPReport(cells=cells, n_samples=plan.n_samples, seed=plan.seed)


def verify_lclt(family: MapFamily, g: Observable, omega: OmegaPath,
                plan: SamplePlan, interval: tuple[float, float],
                s_values: Sequence[float], sigma2: float,
                aperiodicity, variance_floor: float = DEFAULT_VARIANCE_FLOOR
                ) -> LCLTReport:
    """Scaled interval occupation of shifted Birkhoff sums vs the Gaussian law.

    Gated twice: the aperiodicity diagnostic must pass on its t-window and
    the variance must be nondegenerate.
    """
    if aperiodicity is not None and not aperiodicity.all_pass:
        raise AperiodicityRefusal(aperiodicity.failing_t())
    if sigma2 < variance_floor:
        raise DegenerateVarianceError(sigma2, variance_floor)
    n = plan.n_steps
    j0, j1 = interval
    if not j1 > j0:
        raise ValueError("interval must have positive length")
    x = sample_mu_omega(family, omega, plan)
    s_n = np.sort(birkhoff_sums(family, g, omega, x, n)[n])
    sigma = float(np.sqrt(sigma2))
    s_values = np.asarray(list(s_values), dtype=np.float64)
    counts = (np.searchsorted(s_n, j1 - s_values, side="right")
              - np.searchsorted(s_n, j0 - s_values, side="right"))
    probs = counts / plan.n_samples
    empirical = sigma * np.sqrt(n) * probs
    predicted = ((j1 - j0) / np.sqrt(2.0 * np.pi)
                 * np.exp(-s_values ** 2 / (2.0 * n * sigma2)))
    mc_err = sigma * np.sqrt(n) * np.sqrt(np.maximum(counts, 1.0)) / plan.n_samples
    return LCLTReport(n=n, n_samples=plan.n_samples, sigma2=sigma2,
                      interval=(float(j0), float(j1)), s_values=s_values,
                      empirical=empirical, predicted=predicted, mc_err=mc_err,
                      seed=plan.seed)


def empirical_variance(family: MapFamily, g: Observable, omega: OmegaPath,
                       plan: SamplePlan) -> tuple[float, float]:
    """Sample variance of S_n / sqrt(n) with a batch-mean error bar."""
    n = plan.n_steps
    x = sample_mu_omega(family, omega, plan)
    z = birkhoff_sums(family, g, omega, x, n)[n] / np.sqrt(n)
    z2 = (z - z.mean()) ** 2
    scale = plan.n_samples / (plan.n_samples - 1)
    return float(z2.mean() * scale), _batch_stderr(z2, plan.batch_count)
