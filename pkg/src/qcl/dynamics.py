"""Random hyperbolic dynamics on the 2-torus.

A map family is a finite alphabet of torus maps: either a hyperbolic
SL(2,Z) matrix composed with smooth sinusoidal shears, or a piecewise
toral automorphism. The driving path selects which map acts at each
integer time; it is realized lazily through a counter-based hash so the
shift and its inverse are O(1).

Points are numpy arrays of shape (2,) for a single point or (2, N) for
batches, with coordinates in [0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import BoundaryPointError
from .seeding import uniform

TWO_PI = 2.0 * np.pi


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    return (x[:, None], True) if x.ndim == 1 else (x, False)


# ---------------------------------------------------------------------------
# maps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShearTerm:
    """Smooth shear x -> x + amplitude * sin(2 pi freq.x) * vec.

    Volume-preserving exactly when freq.vec == 0; otherwise the map is
    dissipative with Jacobian determinant 1 + 2 pi a cos(2 pi freq.x) (freq.vec).
    """

    freq: tuple[int, int]
    vec: tuple[float, float]
    amplitude: float

    @property
    def volume_preserving(self) -> bool:
        return self.freq[0] * self.vec[0] + self.freq[1] * self.vec[1] == 0.0

    def det_factor_bound(self) -> float:
        # lower bound of the Jacobian determinant factor; must stay positive
        fv = self.freq[0] * self.vec[0] + self.freq[1] * self.vec[1]
        return 1.0 - TWO_PI * abs(self.amplitude) * abs(fv)


@dataclass(frozen=True)
class PiecewisePiece:
    """One polygonal piece: open region {x : n.x < b for all constraints}."""

    matrix: tuple[tuple[int, int], tuple[int, int]]
    constraints: tuple[tuple[float, float, float], ...]  # (n0, n1, b)
    offset: tuple[float, float] = (0.0, 0.0)


def _check_hyperbolic(m) -> None:
    a = np.asarray(m, dtype=np.int64)
    det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    if abs(det) != 1:
        raise ValueError(f"matrix {a.tolist()} must have determinant +-1, got {det}")
    if abs(a[0, 0] + a[1, 1]) <= 2:
        raise ValueError(f"matrix {a.tolist()} is not hyperbolic (|trace| <= 2)")


@dataclass(frozen=True)
class HyperbolicMap:
    """One fiber map on the 2-torus with Jacobian access.

    kind "anosov_perturbed_cat": x -> shears(base_matrix @ x) mod 1, the
    shears applied in order after the linear part.
    kind "piecewise_toral": the piece containing x selects an affine branch.
    """

    kind: str
    base_matrix: tuple[tuple[int, int], tuple[int, int]] = ((2, 1), (1, 1))
    shears: tuple[ShearTerm, ...] = ()
    pieces: tuple[PiecewisePiece, ...] = ()
    amplitude_cap: float = 0.1

    def __post_init__(self):
        if self.kind == "anosov_perturbed_cat":
            _check_hyperbolic(self.base_matrix)
            for s in self.shears:
                if abs(s.amplitude) > self.amplitude_cap:
                    raise ValueError(
                        f"shear amplitude {s.amplitude} exceeds cap {self.amplitude_cap}"
                    )
                if s.det_factor_bound() <= 0.0:
                    raise ValueError("dissipative shear too strong: det can vanish")
        elif self.kind == "piecewise_toral":
            if not self.pieces:
                raise ValueError("piecewise_toral map needs at least one piece")
            for p in self.pieces:
                _check_hyperbolic(p.matrix)
        else:
            raise ValueError(f"unknown map kind {self.kind!r}")

    @property
    def volume_preserving(self) -> bool:
        if self.kind == "piecewise_toral":
            return True
        return all(s.volume_preserving for s in self.shears)

    def unstable_eigenvalue(self) -> float:
        a = np.asarray(self.base_matrix if self.kind == "anosov_perturbed_cat"
                       else self.pieces[0].matrix, dtype=float)
        return float(np.max(np.abs(np.linalg.eigvals(a))))

    # -- evaluation ---------------------------------------------------------

    def _piece_masks(self, x: np.ndarray) -> list[np.ndarray]:
        masks = []
        for p in self.pieces:
            m = np.ones(x.shape[1], dtype=bool)
            for (n0, n1, b) in p.constraints:
                m &= (n0 * x[0] + n1 * x[1] - b) < 0.0
            masks.append(m)
        return masks

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Image of x under the map, reduced mod 1."""
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "anosov_perturbed_cat":
            a = self.base_matrix
            y0 = a[0][0] * x[0] + a[0][1] * x[1]
            y1 = a[1][0] * x[0] + a[1][1] * x[1]
            for s in self.shears:
                if s.amplitude == 0.0:
                    continue
                phase = np.sin(TWO_PI * (s.freq[0] * y0 + s.freq[1] * y1))
                if s.vec[0] != 0.0:
                    y0 = y0 + s.amplitude * s.vec[0] * phase
                if s.vec[1] != 0.0:
                    y1 = y1 + s.amplitude * s.vec[1] * phase
            return np.stack((y0 % 1.0, y1 % 1.0))

        x2, single = _as_batch(x)
        masks = self._piece_masks(x2)
        covered = np.zeros(x2.shape[1], dtype=bool)
        out = np.empty_like(x2)
        for p, m in zip(self.pieces, masks):
            sel = m & ~covered
            if np.any(sel):
                mat = p.matrix
                out[0][sel] = (mat[0][0] * x2[0][sel] + mat[0][1] * x2[1][sel]
                               + p.offset[0]) % 1.0
                out[1][sel] = (mat[1][0] * x2[0][sel] + mat[1][1] * x2[1][sel]
                               + p.offset[1]) % 1.0
            covered |= sel
        if not np.all(covered):
            raise BoundaryPointError("point lies on a partition boundary")
        return out[:, 0] if single else out

    def jacobian_det(self, x: np.ndarray) -> np.ndarray:
        """|det DT(x)|, evaluated along the same forward pass as apply()."""
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "anosov_perturbed_cat":
            a = self.base_matrix
            det = np.full(x.shape[1:], float(abs(a[0][0] * a[1][1] - a[0][1] * a[1][0])))
            y0 = a[0][0] * x[0] + a[0][1] * x[1]
            y1 = a[1][0] * x[0] + a[1][1] * x[1]
            for s in self.shears:
                fv = s.freq[0] * s.vec[0] + s.freq[1] * s.vec[1]
                if s.amplitude != 0.0 and fv != 0.0:
                    c = np.cos(TWO_PI * (s.freq[0] * y0 + s.freq[1] * y1))
                    det = det * np.abs(1.0 + TWO_PI * s.amplitude * fv * c)
                if s.amplitude != 0.0:
                    phase = np.sin(TWO_PI * (s.freq[0] * y0 + s.freq[1] * y1))
                    if s.vec[0] != 0.0:
                        y0 = y0 + s.amplitude * s.vec[0] * phase
                    if s.vec[1] != 0.0:
                        y1 = y1 + s.amplitude * s.vec[1] * phase
            return det

        x2, single = _as_batch(x)
        masks = self._piece_masks(x2)
        covered = np.zeros(x2.shape[1], dtype=bool)
        out = np.empty(x2.shape[1], dtype=np.float64)
        for p, m in zip(self.pieces, masks):
            sel = m & ~covered
            mat = p.matrix
            out[sel] = float(abs(mat[0][0] * mat[1][1] - mat[0][1] * mat[1][0]))
            covered |= sel
        if not np.all(covered):
            raise BoundaryPointError("point lies on a partition boundary")
        return float(out[0]) if single else out

    def boundary_mask(self, x: np.ndarray) -> np.ndarray:
        """True where x is not strictly inside any piece (piecewise kind only)."""
        x = np.asarray(x, dtype=np.float64)
        if self.kind != "piecewise_toral":
            return np.zeros(x.shape[1:], dtype=bool)
        x2, single = _as_batch(x)
        covered = np.zeros(x2.shape[1], dtype=bool)
        for m in self._piece_masks(x2):
            covered |= m
        out = ~covered
        return bool(out[0]) if single else out

    def tangent_apply(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """DT(x) v for tangent vectors v, same shape convention as points."""
        x = np.asarray(x, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if self.kind == "anosov_perturbed_cat":
            a = self.base_matrix
            w0 = a[0][0] * v[0] + a[0][1] * v[1]
            w1 = a[1][0] * v[0] + a[1][1] * v[1]
            y0 = a[0][0] * x[0] + a[0][1] * x[1]
            y1 = a[1][0] * x[0] + a[1][1] * x[1]
            for s in self.shears:
                if s.amplitude != 0.0:
                    c = TWO_PI * s.amplitude * np.cos(
                        TWO_PI * (s.freq[0] * y0 + s.freq[1] * y1))
                    dphase = c * (s.freq[0] * w0 + s.freq[1] * w1)
                    w0n = w0 + s.vec[0] * dphase
                    w1n = w1 + s.vec[1] * dphase
                    phase = np.sin(TWO_PI * (s.freq[0] * y0 + s.freq[1] * y1))
                    y0 = y0 + s.amplitude * s.vec[0] * phase
                    y1 = y1 + s.amplitude * s.vec[1] * phase
                    w0, w1 = w0n, w1n
            return np.stack((w0, w1))

        x2, single = _as_batch(x)
        v2, _ = _as_batch(v)
        masks = self._piece_masks(x2)
        covered = np.zeros(x2.shape[1], dtype=bool)
        out = np.empty_like(v2)
        for p, m in zip(self.pieces, masks):
            sel = m & ~covered
            mat = p.matrix
            out[0][sel] = mat[0][0] * v2[0][sel] + mat[0][1] * v2[1][sel]
            out[1][sel] = mat[1][0] * v2[0][sel] + mat[1][1] * v2[1][sel]
            covered |= sel
        if not np.all(covered):
            raise BoundaryPointError("point lies on a partition boundary")
        return out[:, 0] if single else out


@dataclass(frozen=True)
class MapFamily:
    """The finite alphabet of fiber maps driven by the symbol path."""

    maps: tuple[HyperbolicMap, ...]

    def __post_init__(self):
        if not self.maps:
            raise ValueError("map family must not be empty")

    def __len__(self) -> int:
        return len(self.maps)

    def __getitem__(self, a: int) -> HyperbolicMap:
        return self.maps[a]

    @property
    def volume_preserving(self) -> bool:
        return all(m.volume_preserving for m in self.maps)


# ---------------------------------------------------------------------------
# driving path
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OmegaPath:
    """A realization of the ergodic driving: a bi-infinite i.i.d. symbol path.

    symbol(i) is a pure function of (seed, i + offset), so shifting in either
    direction is O(1) and the same seed always reproduces the same path. The
    constant path (all symbols equal) is available as the periodic diagnostic
    point of period one.
    """

    seed: int
    alphabet_size: int
    distribution: tuple[float, ...]
    offset: int = 0
    constant_symbol: Optional[int] = None
    _cum: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        dist = np.asarray(self.distribution, dtype=np.float64)
        if len(dist) != self.alphabet_size:
            raise ValueError("distribution length must equal alphabet_size")
        if abs(dist.sum() - 1.0) > 1e-9:
            raise ValueError(f"distribution must sum to 1, got {dist.sum()!r}")
        if np.any(dist <= 0.0):
            raise ValueError("every symbol must have positive probability")
        object.__setattr__(self, "_cum", np.cumsum(dist))

    @classmethod
    def constant(cls, symbol: int = 0, alphabet_size: int = 1,
                 distribution: Optional[Sequence[float]] = None) -> "OmegaPath":
        if distribution is None:
            distribution = tuple(1.0 / alphabet_size for _ in range(alphabet_size))
        return cls(seed=0, alphabet_size=alphabet_size,
                   distribution=tuple(distribution), constant_symbol=symbol)

    def symbol(self, i) -> np.ndarray:
        """Symbol at time index i (scalar or integer array)."""
        if self.constant_symbol is not None:
            out = np.full(np.shape(i), self.constant_symbol, dtype=np.int64)
            return out if out.ndim else int(self.constant_symbol)
        u = uniform(self.seed, np.asarray(i, dtype=np.int64) + self.offset)
        out = np.searchsorted(self._cum, u, side="right").astype(np.int64)
        # guard against u == 1.0 rounding (cannot happen with 53-bit uniforms,
        # kept for safety with degenerate distributions)
        out = np.minimum(out, self.alphabet_size - 1)
        return out if out.ndim else int(out)

    def shifted(self, k: int) -> "OmegaPath":
        return replace(self, offset=self.offset + int(k))


def sigma_shift(omega: OmegaPath, k: int) -> OmegaPath:
    """Shift the driving path by k steps (k may be negative)."""
    return omega.shifted(k)


# ---------------------------------------------------------------------------
# observables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObservableTerm:
    freq: tuple[int, int]
    cos_coeff: float = 0.0
    sin_coeff: float = 0.0


@dataclass(frozen=True)
class Observable:
    """Per-symbol trigonometric polynomial with per-symbol centering offsets.

    g_a(x) = sum_m c_{a,m} cos(2 pi m.x) + s_{a,m} sin(2 pi m.x) - offset_a
    """

    terms: tuple[tuple[ObservableTerm, ...], ...]  # one tuple per symbol
    offsets: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.offsets:
            object.__setattr__(self, "offsets", tuple(0.0 for _ in self.terms))
        if len(self.offsets) != len(self.terms):
            raise ValueError("offsets length must match number of symbols")

    @classmethod
    def zero(cls, n_symbols: int) -> "Observable":
        return cls(terms=tuple(() for _ in range(n_symbols)))

    @property
    def n_symbols(self) -> int:
        return len(self.terms)

    @property
    def is_zero(self) -> bool:
        return all(len(t) == 0 for t in self.terms) and all(
            o == 0.0 for o in self.offsets)

    def evaluate(self, symbol: int, x: np.ndarray) -> np.ndarray:
        """g_symbol(x) for points of shape (2,) or (2, N)."""
        x = np.asarray(x, dtype=np.float64)
        out = np.full(x.shape[1:], -self.offsets[symbol], dtype=np.float64)
        for t in self.terms[symbol]:
            phase = TWO_PI * (t.freq[0] * x[0] + t.freq[1] * x[1])
            if t.cos_coeff != 0.0:
                out += t.cos_coeff * np.cos(phase)
            if t.sin_coeff != 0.0:
                out += t.sin_coeff * np.sin(phase)
        return out

    def sup_bound(self) -> float:
        """Upper bound on max_a |g_a|_inf (coefficient sums plus offsets)."""
        best = 0.0
        for a, terms in enumerate(self.terms):
            s = sum(abs(t.cos_coeff) + abs(t.sin_coeff) for t in terms)
            best = max(best, s + abs(self.offsets[a]))
        return best

    def c1_bound(self) -> float:
        """Upper bound on max_a ||g_a||_C1."""
        best = 0.0
        for a, terms in enumerate(self.terms):
            s = abs(self.offsets[a])
            for t in terms:
                amp = abs(t.cos_coeff) + abs(t.sin_coeff)
                s += amp * (1.0 + TWO_PI * float(np.hypot(*t.freq)))
            best = max(best, s)
        return best

    def lebesgue_means(self) -> tuple[float, ...]:
        """Exact Lebesgue mean per symbol (only the constant mode survives)."""
        means = []
        for a, terms in enumerate(self.terms):
            m = -self.offsets[a]
            for t in terms:
                if t.freq == (0, 0):
                    m += t.cos_coeff
            means.append(m)
        return tuple(means)

    def with_offsets(self, offsets: Sequence[float]) -> "Observable":
        return replace(self, offsets=tuple(float(o) for o in offsets))


# ---------------------------------------------------------------------------
# cocycle operations
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SkewState:
    """A point of the skew product: driving path plus torus point."""

    omega: OmegaPath
    x: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if np.any(x < 0.0) or np.any(x >= 1.0):
            raise ValueError("skew state point must have coordinates in [0, 1)")
        object.__setattr__(self, "x", x)


def apply_map(m: HyperbolicMap, x: np.ndarray) -> np.ndarray:
    return m.apply(x)


def map_jacobian_det(m: HyperbolicMap, x: np.ndarray) -> np.ndarray:
    return m.jacobian_det(x)


def compose(family: MapFamily, omega: OmegaPath, n: int, x: np.ndarray) -> np.ndarray:
    """n-fold composition along the path, symbol(i) selecting the i-th map."""
    if n < 0:
        raise ValueError("composition length must be nonnegative")
    y = np.asarray(x, dtype=np.float64)
    for i in range(n):
        y = family[omega.symbol(i)].apply(y)
    return y


def birkhoff_sum(family: MapFamily, omega: OmegaPath, x: np.ndarray, n: int,
                 g: Observable) -> np.ndarray:
    """Sum of g along the first n steps of the random orbit from x."""
    if n < 0:
        raise ValueError("Birkhoff length must be nonnegative")
    y = np.asarray(x, dtype=np.float64)
    total = np.zeros(y.shape[1:], dtype=np.float64)
    for i in range(n):
        a = omega.symbol(i)
        total += g.evaluate(a, y)
        y = family[a].apply(y)
    return total if total.ndim else float(total)


def skew_step(family: MapFamily, state: SkewState) -> SkewState:
    """One step of the skew product: (omega, x) -> (shifted omega, T_omega x)."""
    a = state.omega.symbol(0)
    return SkewState(omega=state.omega.shifted(1), x=family[a].apply(state.x))


def expansion_certificate(family: MapFamily, n_orbits: int, n_steps: int,
                          seed: int, lambda_min: float = 1.2) -> dict:
    """Empirical hyperbolicity check: unstable vectors expand at every step.

    Pushes the unstable eigendirection of the base matrix along random orbits
    (random starting points and random symbols) and records the per-step
    growth factors. Passes when the minimum factor stays above lambda_min.
    """
    base = family[0]
    mat = np.asarray(base.base_matrix if base.kind == "anosov_perturbed_cat"
                     else base.pieces[0].matrix, dtype=float)
    evals, evecs = np.linalg.eig(mat)
    v_u = np.real(evecs[:, np.argmax(np.abs(evals))])
    v_u = v_u / np.linalg.norm(v_u)

    x = np.stack([uniform(seed, np.arange(n_orbits), c) for c in (0, 1)])
    v = np.tile(v_u[:, None], (1, n_orbits))
    symbols = uniform(seed ^ 0x5A5A, np.arange(n_steps))
    min_growth = np.inf
    for i in range(n_steps):
        a = int(symbols[i] * len(family)) % len(family)
        w = family[a].tangent_apply(x, v)
        norms = np.hypot(w[0], w[1])
        min_growth = min(min_growth, float(norms.min()))
        v = w / norms
        x = family[a].apply(x)
    return {
        "min_growth": min_growth,
        "lambda_min": lambda_min,
        "passed": bool(min_growth >= lambda_min),
        "n_orbits": n_orbits,
        "n_steps": n_steps,
    }
