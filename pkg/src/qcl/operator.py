"""Discretized transfer-operator cocycle on a torus grid.

The transfer operator of each fiber map is approximated by a row-stochastic
cell-to-cell transition matrix (Ulam discretization): entry (i, j) is the
fraction of cell i mapped into cell j, estimated by stratified sampling.
Twisted matrices reuse the same sample stream with each transition weighted
by exp(theta * g) at the source point, so theta = 0 reproduces the
untwisted matrix bit for bit.

This grid surrogate replaces the anisotropic function spaces of the
underlying theory; its fixed points approximate the equivariant densities
and its products carry the Lyapunov spectrum diagnostics. Convergence is
cross-checked statistically, not proven.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import stats

from .dynamics import HyperbolicMap, MapFamily, Observable, OmegaPath
from .errors import FrameDegeneracyError
from .seeding import derive_key, uniform

_MAX_BOUNDARY_RETRIES = 64


# ---------------------------------------------------------------------------
# grid and vectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UlamGrid:
    """k x k partition of the torus into axis-aligned square cells.

    Cell c = ix * k + iy covers [ix/k, (ix+1)/k) x [iy/k, (iy+1)/k).
    """

    k: int

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("grid needs k >= 2 cells per axis")

    @property
    def n_cells(self) -> int:
        return self.k * self.k

    def cell_index(self, x: np.ndarray) -> np.ndarray:
        ix = np.minimum((x[0] * self.k).astype(np.int64), self.k - 1)
        iy = np.minimum((x[1] * self.k).astype(np.int64), self.k - 1)
        return ix * self.k + iy

    def centers(self) -> np.ndarray:
        """Cell centers as points of shape (2, n_cells)."""
        idx = np.arange(self.n_cells)
        return np.stack(((idx // self.k + 0.5) / self.k,
                         (idx % self.k + 0.5) / self.k))


@dataclass
class DensityVector:
    """A density on the grid stored as per-cell masses (weights)."""

    grid: UlamGrid
    weights: np.ndarray

    @classmethod
    def uniform(cls, grid: UlamGrid) -> "DensityVector":
        return cls(grid, np.full(grid.n_cells, 1.0 / grid.n_cells))

    def mass(self):
        return self.weights.sum()

    def l1(self) -> float:
        return float(np.abs(self.weights).sum())

    def l1_distance(self, other: "DensityVector") -> float:
        return float(np.abs(self.weights - other.weights).sum())

    def min_weight(self) -> float:
        return float(np.real(self.weights).min())

    def aggregate_to(self, coarse: UlamGrid) -> "DensityVector":
        k, kc = self.grid.k, coarse.k
        if k % kc:
            raise ValueError("fine grid size must be a multiple of the coarse one")
        r = k // kc
        w = self.weights.reshape(kc, r, kc, r).sum(axis=(1, 3)).ravel()
        return DensityVector(coarse, w)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("cell_index,weight\n")
            for i, w in enumerate(self.weights):
                fh.write(f"{i},{w:.17g}\n")


def total_variation(weights: np.ndarray, k: int) -> float:
    """Grid total variation of the piecewise-constant density (torus edges)."""
    d = weights.reshape(k, k) * (k * k)
    tv = np.abs(d - np.roll(d, 1, axis=0)).sum() + np.abs(d - np.roll(d, 1, axis=1)).sum()
    return float(tv / k)


# ---------------------------------------------------------------------------
# matrices
# ---------------------------------------------------------------------------

@dataclass
class UlamMatrix:
    """Sparse transition matrix for one fiber map (real or complex twisted)."""

    grid: UlamGrid
    matrix: sp.csr_matrix
    theta: complex
    symbol: int

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def write_coordinate_text(self, path) -> None:
        coo = self.matrix.tocoo()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("row,col,re,im\n")
            for r, c, v in zip(coo.row, coo.col, coo.data):
                z = complex(v)
                fh.write(f"{r},{c},{z.real:.17g},{z.imag:.17g}\n")


class _TransitionSamples:
    """Frozen stratified sample stream for one (map, grid) pair."""

    def __init__(self, m: HyperbolicMap, grid: UlamGrid, samples_per_cell: int,
                 key: int, g: Optional[Observable], symbol: int):
        if samples_per_cell < 1:
            raise ValueError("need at least one sample per cell")
        k, s = grid.k, samples_per_cell
        n_cells = grid.n_cells
        cell = np.repeat(np.arange(n_cells, dtype=np.int64), s)
        samp = np.tile(np.arange(s, dtype=np.int64), n_cells)
        strata = math.ceil(math.sqrt(s))
        jx, jy = samp % strata, samp // strata
        ix, iy = cell // k, cell % k

        # Stratum jitter is shared across cells: the sample set is then one
        # global lattice of spacing 1/(k*strata). Unimodular integer matrices
        # map that lattice onto a translate of itself and axis-aligned shears
        # move whole lattice columns rigidly, so every cell receives exactly
        # s image points and sampled matrices of volume-preserving maps come
        # out exactly doubly stochastic.
        u0 = uniform(key, samp, 0)
        u1 = uniform(key, samp, 1)
        pts = np.stack(((ix + (jx + u0) / strata) / k,
                        (iy + (jy + u1) / strata) / k))
        self.n_resampled = 0
        bad = m.boundary_mask(pts)
        for attempt in range(1, _MAX_BOUNDARY_RETRIES + 1):
            if not bad.any():
                break
            # per-sample rehash only for points sitting on a partition boundary
            r0 = uniform(key, cell[bad], samp[bad], 2 * attempt)
            r1 = uniform(key, cell[bad], samp[bad], 2 * attempt + 1)
            pts[0, bad] = (ix[bad] + (jx[bad] + r0) / strata) / k
            pts[1, bad] = (iy[bad] + (jy[bad] + r1) / strata) / k
            self.n_resampled += int(np.count_nonzero(bad))
            bad = m.boundary_mask(pts)
        else:
            raise RuntimeError("could not move samples off the partition boundary")

        image = m.apply(pts)
        self.src = cell.astype(np.int32)
        self.dst = grid.cell_index(image).astype(np.int32)
        self.gval = g.evaluate(symbol, pts) if g is not None else None
        self.samples_per_cell = s
        self.grid = grid
        self.symbol = symbol

    def matrix(self, theta: complex) -> sp.csr_matrix:
        s = self.samples_per_cell
        if theta == 0:
            w = np.ones(len(self.src))
        else:
            if self.gval is None:
                raise ValueError("twisted matrix requested without an observable")
            th = complex(theta)
            w = np.exp((th if th.imag else th.real) * self.gval)
        mat = sp.coo_matrix((w, (self.src, self.dst)),
                            shape=(self.grid.n_cells, self.grid.n_cells)).tocsr()
        mat.data /= s
        return mat


class UlamCocycle:
    """Per-symbol Ulam matrices for a map family, with twisted variants.

    Matrices and their transposed push operators are cached per
    (symbol, theta). All sampling is a pure function of (seed, symbol,
    cell, sample index), so rebuilds are reproducible.
    """

    def __init__(self, family: MapFamily, grid: UlamGrid, samples_per_cell: int = 256,
                 seed: int = 0, g: Optional[Observable] = None):
        self.family = family
        self.grid = grid
        self.samples_per_cell = samples_per_cell
        self.seed = seed
        self.g = g
        self._samples: dict[int, _TransitionSamples] = {}
        self._matrices: dict[tuple[int, complex], UlamMatrix] = {}
        self._push_ops: dict[tuple[int, complex], sp.csr_matrix] = {}

    def samples(self, symbol: int) -> _TransitionSamples:
        if symbol not in self._samples:
            key = derive_key(self.seed, f"ulam/{symbol}")
            self._samples[symbol] = _TransitionSamples(
                self.family[symbol], self.grid, self.samples_per_cell, key,
                self.g, symbol)
        return self._samples[symbol]

    def matrix(self, symbol: int, theta: complex = 0) -> UlamMatrix:
        keyt = complex(theta)
        key = (symbol, keyt)
        if key not in self._matrices:
            self._matrices[key] = UlamMatrix(
                grid=self.grid, matrix=self.samples(symbol).matrix(theta),
                theta=keyt, symbol=symbol)
        return self._matrices[key]

    def push_op(self, symbol: int, theta: complex = 0) -> sp.csr_matrix:
        """Transposed matrix, so densities evolve as v -> push_op @ v."""
        key = (symbol, complex(theta))
        if key not in self._push_ops:
            self._push_ops[key] = self.matrix(symbol, theta).matrix.T.tocsr()
        return self._push_ops[key]


def build_ulam(m: HyperbolicMap, grid: UlamGrid, samples_per_cell: int,
               seed: int = 0, symbol: int = 0) -> UlamMatrix:
    """Row-stochastic Ulam matrix for a single map."""
    key = derive_key(seed, f"ulam/{symbol}")
    samples = _TransitionSamples(m, grid, samples_per_cell, key, None, symbol)
    return UlamMatrix(grid=grid, matrix=samples.matrix(0), theta=0j, symbol=symbol)


def build_twisted(m: HyperbolicMap, g: Observable, symbol: int, theta: complex,
                  grid: UlamGrid, samples_per_cell: int, seed: int = 0) -> UlamMatrix:
    """Twisted Ulam matrix; theta = 0 reproduces build_ulam exactly."""
    key = derive_key(seed, f"ulam/{symbol}")
    samples = _TransitionSamples(m, grid, samples_per_cell, key, g, symbol)
    return UlamMatrix(grid=grid, matrix=samples.matrix(theta), theta=complex(theta),
                      symbol=symbol)


# ---------------------------------------------------------------------------
# equivariant densities
# ---------------------------------------------------------------------------

def equivariant_density(cocycle: UlamCocycle, omega: OmegaPath, n_pullback: int,
                        early_stop: Optional[float] = 1e-9) -> DensityVector:
    """Pullback approximation of the equivariant density at the given fiber.

    Starts from the uniform density n_pullback fibers in the past and pushes
    forward along the path, renormalizing to unit mass at every step.
    """
    if n_pullback < 0:
        raise ValueError("pullback depth must be nonnegative")
    v = np.full(cocycle.grid.n_cells, 1.0 / cocycle.grid.n_cells)
    prev = v
    for d in range(n_pullback, 0, -1):
        a = omega.symbol(-d)
        v = cocycle.push_op(a) @ v
        v = v / v.sum()
        if early_stop is not None and np.abs(v - prev).sum() < early_stop:
            break
        prev = v
    return DensityVector(cocycle.grid, v)


def pullback_decay_profile(cocycle: UlamCocycle, omega: OmegaPath,
                           n_max: int) -> list[tuple[int, float]]:
    """L1 gaps between successive pullback depths at the same fiber."""
    if n_max < 2:
        raise ValueError("need n_max >= 2")
    iterates = [equivariant_density(cocycle, omega, n, early_stop=None).weights
                for n in range(n_max + 1)]
    return [(n, float(np.abs(iterates[n] - iterates[n + 1]).sum()))
            for n in range(n_max)]


def fit_decay(profile: Sequence[tuple[int, float]], floor: float = 1e-13) -> dict:
    """Linear fit of log gap against depth; flags already-converged profiles."""
    ns = np.array([n for n, _ in profile], dtype=float)
    gaps = np.array([gap for _, gap in profile], dtype=float)
    usable = gaps > floor
    if usable.sum() < 3:
        return {"slope": 0.0, "r2": 1.0, "converged": True,
                "max_gap": float(gaps.max(initial=0.0))}
    res = stats.linregress(ns[usable], np.log(gaps[usable]))
    return {"slope": float(res.slope), "r2": float(res.rvalue ** 2),
            "converged": False, "max_gap": float(gaps.max())}


# ---------------------------------------------------------------------------
# Lyapunov spectrum of the matrix cocycle
# ---------------------------------------------------------------------------

@dataclass
class LyapunovReport:
    exponents: np.ndarray
    n_steps: int
    reorth_period: int
    residuals: np.ndarray  # orthogonality defects just before each QR

    def to_dict(self) -> dict:
        return {
            "exponents": [float(x) for x in self.exponents],
            "n_steps": self.n_steps,
            "reorth_period": self.reorth_period,
            "max_orthogonality_defect": float(self.residuals.max(initial=0.0)),
        }


def lyapunov_spectrum(cocycle: UlamCocycle, omega: OmegaPath, n_steps: int,
                      r: int = 2, reorth_period: int = 10,
                      seed: int = 0) -> LyapunovReport:
    """Top r Lyapunov exponents of the Ulam matrix cocycle by QR iteration."""
    if r > 12:
        raise ValueError("at most 12 exponents are supported")
    if n_steps < 2 * reorth_period:
        raise ValueError("n_steps must be much larger than reorth_period")
    n = cocycle.grid.n_cells
    rng = np.random.default_rng(derive_key(seed, "lyapunov_frame"))
    frame = rng.standard_normal((n, r))
    # leading column starts at the uniform density so the top direction is
    # well represented from step one (no O(log n / n_steps) alignment bias)
    frame[:, 0] = 1.0
    q, _ = np.linalg.qr(frame)
    acc = np.zeros(r)
    residuals = []
    step = 0
    while step < n_steps:
        block = min(reorth_period, n_steps - step)
        for i in range(block):
            q = cocycle.push_op(omega.symbol(step + i)) @ q
        step += block
        residuals.append(float(np.abs(q.T @ q - np.eye(r)).max()))
        q, rmat = np.linalg.qr(q)
        diag = np.abs(np.diag(rmat))
        if (not np.all(np.isfinite(diag))
                or np.any(diag < 1e-15 * diag.max(initial=0.0))):
            raise FrameDegeneracyError(step)
        acc += np.log(diag)
    exponents = np.sort(acc / n_steps)[::-1]
    return LyapunovReport(exponents=exponents, n_steps=n_steps,
                          reorth_period=reorth_period,
                          residuals=np.array(residuals))


def dense_log_spectrum(mat: sp.csr_matrix, top: int) -> np.ndarray:
    """log moduli of the top eigenvalues of a single matrix (dense oracle)."""
    vals = np.linalg.eigvals(mat.toarray())
    mods = np.sort(np.abs(vals))[::-1]
    return np.log(mods[:top])


def leading_eigenvalue_modulus(mat: sp.csr_matrix, dense_cutoff: int = 1500) -> float:
    """Spectral radius of one (possibly complex) matrix."""
    n = mat.shape[0]
    if n <= dense_cutoff:
        return float(np.abs(np.linalg.eigvals(mat.toarray())).max())
    v0 = np.ones(n) / n
    try:
        vals = spla.eigs(mat.astype(np.complex128), k=1, which="LM", v0=v0,
                         maxiter=10000, tol=1e-10, return_eigenvectors=False)
        return float(np.abs(vals[0]))
    except spla.ArpackNoConvergence:
        return float(np.abs(np.linalg.eigvals(mat.toarray())).max())


# ---------------------------------------------------------------------------
# Lasota-Yorke surrogate probe
# ---------------------------------------------------------------------------

@dataclass
class LYFit:
    """Fitted constants of the two-norm inequality on the grid surrogate.

    strong norm: grid total variation at the fine resolution
    weak norm:   L1 after aggregation to the coarse resolution
    The inequality fitted is  strong(L^(n) h) <= A rate^n strong(h) + B weak(h).
    """

    strong_coef: float   # A
    weak_coef: float     # B
    rate: float          # the contraction factor, < 1 on success
    coef: float          # max(A, B), the single-constant form
    slopes: dict
    min_r2: float
    n_grid: tuple
    ok: bool
    residual_max: float
    theta: complex = 0j

    def to_dict(self) -> dict:
        return {
            "strong_coef": self.strong_coef, "weak_coef": self.weak_coef,
            "rate": self.rate, "coef": self.coef, "ok": self.ok,
            "min_r2": self.min_r2, "residual_max": self.residual_max,
            "theta_im": complex(self.theta).imag,
        }


def _ly_test_densities(grid: UlamGrid, k_coarse: int):
    """Uniform plus oscillatory modes; some modes aggregate to zero coarsely."""
    centers = grid.centers()
    n = grid.n_cells
    dens = [("uniform", np.full(n, 1.0 / n))]
    low = [(1, 0), (0, 1), (1, 1), (2, 1), (0, 3)]
    invisible = [(k_coarse, 0), (0, k_coarse), (k_coarse, k_coarse)]
    for fx, fy in low + invisible:
        w = np.cos(2.0 * np.pi * (fx * centers[0] + fy * centers[1])) / n
        dens.append((f"mode_{fx}_{fy}", w))
    return dens, {f"mode_{fx}_{fy}" for fx, fy in invisible}


def lasota_yorke_probe(cocycle: UlamCocycle, omega: OmegaPath,
                       n_grid: Sequence[int], k_coarse: int,
                       theta: complex = 0) -> LYFit:
    """Fit the strong/weak norm inequality along the (possibly twisted) cocycle."""
    k_fine = cocycle.grid.k
    if k_fine <= k_coarse or k_fine % k_coarse:
        raise ValueError("fine grid must strictly refine the coarse grid")
    n_grid = tuple(sorted(set(int(n) for n in n_grid)))
    if n_grid[0] < 0:
        raise ValueError("inequality horizon must be nonnegative")
    coarse = UlamGrid(k_coarse)
    dens, invisible = _ly_test_densities(cocycle.grid, k_coarse)

    records = []  # (name, n, strong_n, strong_0, weak_0)
    for name, w0 in dens:
        s0 = total_variation(w0, k_fine)
        w_coarse = DensityVector(cocycle.grid, w0).aggregate_to(coarse)
        weak0 = w_coarse.l1()
        v = w0.astype(np.complex128 if complex(theta).imag else np.float64)
        step = 0
        for n in n_grid:
            while step < n:
                v = cocycle.push_op(omega.symbol(step), theta) @ v
                step += 1
            records.append((name, n, total_variation(v, k_fine), s0, weak0))

    # Contraction rate from the tail of each mode's strong-norm history.
    # Hyperbolicity first migrates oscillation toward the grid Nyquist
    # frequency, so the strong norm bumps up before the decay sets in; the
    # transient belongs to the constants, only the tail carries the rate.
    slopes, r2s = {}, []
    for name, _ in dens:
        pts = [(n, y) for (nm, n, y, s0, _) in records if nm == name and s0 > 0]
        ys = np.array([y for _, y in pts])
        ns = np.array([float(n) for n, _ in pts])
        usable = ys > 1e-13 * ys.max(initial=0.0)
        if name == "uniform" or usable.sum() < 3:
            continue
        tail = min(int(usable.sum()), max(3, int(usable.sum()) // 2))
        ns_t, ys_t = ns[usable][-tail:], ys[usable][-tail:]
        res = stats.linregress(ns_t, np.log(ys_t))
        slopes[name] = float(res.slope)
        r2s.append(float(res.rvalue ** 2))
    rate = float(np.exp(max(slopes.values()))) if slopes else 1.0
    ok = rate < 1.0
    rate_fit = min(rate, 1.0 - 1e-12)

    strong_coef = 1.0
    for name, n, y, s0, _ in records:
        if name in invisible and s0 > 0:
            strong_coef = max(strong_coef, y / (rate_fit ** n * s0))
    weak_coef = 1.0
    for name, n, y, s0, w0 in records:
        if w0 > 1e-300:
            weak_coef = max(weak_coef, (y - strong_coef * rate_fit ** n * s0) / w0)
    residual = max(y - (strong_coef * rate_fit ** n * s0 + weak_coef * w0)
                   for _, n, y, s0, w0 in records)
    return LYFit(strong_coef=float(strong_coef), weak_coef=float(weak_coef),
                 rate=rate, coef=float(max(strong_coef, weak_coef)),
                 slopes=slopes, min_r2=float(min(r2s)) if r2s else 0.0,
                 n_grid=n_grid, ok=ok, residual_max=float(residual),
                 theta=complex(theta))


# ---------------------------------------------------------------------------
# observable centering against the discrete equivariant family
# ---------------------------------------------------------------------------

def estimate_centering(cocycle: UlamCocycle, omega: OmegaPath, g: Observable,
                       n_fibers: int = 64, n_pullback: int = 50) -> dict:
    """Per-symbol equivariant means of g and the residual fiber means.

    Pulls the density forward along the path and averages the fiber
    integrals of g conditioned on the active symbol. The returned offsets
    make each symbol-conditional mean vanish; residuals measure how far
    individual fibers stay from zero after that centering.
    """
    centers = cocycle.grid.centers()
    gc = np.stack([g.evaluate(a, centers) for a in range(g.n_symbols)])
    v = equivariant_density(cocycle, omega, n_pullback, early_stop=None).weights
    sums = np.zeros(g.n_symbols)
    counts = np.zeros(g.n_symbols, dtype=np.int64)
    fiber_means = []
    fiber_symbols = []
    for i in range(n_fibers):
        a = omega.symbol(i)
        mean_i = float(gc[a] @ v)
        sums[a] += mean_i
        counts[a] += 1
        fiber_means.append(mean_i)
        fiber_symbols.append(a)
        v = cocycle.push_op(a) @ v
        v = v / v.sum()
    offsets = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    residuals = np.array([m - offsets[a]
                          for m, a in zip(fiber_means, fiber_symbols)])
    return {
        "offsets": tuple(float(o) for o in offsets),
        "residual_max": float(np.abs(residuals).max(initial=0.0)),
        "residual_mean": float(np.abs(residuals).mean()) if len(residuals) else 0.0,
        "fiber_count": n_fibers,
    }
