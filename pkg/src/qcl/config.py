"""Experiment configuration: schema, validation, hashing, presets.

Configs are TOML files (key/value with nested tables); JSON files with the
same structure are accepted as an alternative surface. All randomness flows
from the single root seed; modules derive their streams by labeled hashing.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .dynamics import (HyperbolicMap, MapFamily, Observable, ObservableTerm,
                       OmegaPath, PiecewisePiece, ShearTerm)
from .errors import ConfigError
from .seeding import derive_key

_VERSION = "0.1.0"


# ---------------------------------------------------------------------------
# loading and hashing
# ---------------------------------------------------------------------------

def load_config_dict(path: str) -> dict:
    text = open(path, "rb").read()
    if str(path).endswith(".json") or text.lstrip()[:1] == b"{":
        try:
            return json.loads(text.decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON: {exc}") from exc
    try:
        import tomllib  # py311+
    except ModuleNotFoundError:
        import tomli as tomllib
    try:
        return tomllib.loads(text.decode("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"invalid TOML: {exc}") from exc


def _canonical(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def config_hash(raw: dict) -> str:
    """Content digest of the config, stable under key reordering."""
    blob = json.dumps(_canonical(raw), sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply dotted key=value overrides (values parsed as JSON, else strings)."""
    out = json.loads(json.dumps(_canonical(raw)))
    for item in overrides:
        if "=" not in item:
            raise ConfigError("--set", f"override {item!r} is not key=value")
        key, _, value = item.partition("=")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(key, "override path crosses a non-table value")
        node[parts[-1]] = parsed
    return out


# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------

def _need(raw: dict, field_name: str, typ, path: str):
    if field_name not in raw:
        raise ConfigError(f"{path}.{field_name}", "missing required field")
    val = raw[field_name]
    if typ is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if not isinstance(val, typ) or isinstance(val, bool) and typ is not bool:
        raise ConfigError(f"{path}.{field_name}",
                          f"expected {getattr(typ, '__name__', typ)}, got "
                          f"{type(val).__name__}")
    return val


@dataclass
class ExperimentConfig:
    """Validated experiment description plus typed accessors."""

    raw: dict
    seed: int = field(init=False)

    def __post_init__(self):
        self.raw = _canonical(self.raw)
        self._validate()
        self.seed = int(self.raw["seed"])

    # -- validation ---------------------------------------------------------

    def _validate(self) -> None:
        raw = self.raw
        if "seed" not in raw:
            raise ConfigError("seed", "missing required field")
        if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
            raise ConfigError("seed", "root seed must be an integer")

        maps = _need(raw, "maps", dict, "")
        kind = _need(maps, "kind", str, "maps")
        if kind not in ("anosov_perturbed_cat", "piecewise_toral"):
            raise ConfigError("maps.kind", f"unknown kind {kind!r}")
        symbols = _need(maps, "symbols", list, "maps")
        if not symbols:
            raise ConfigError("maps.symbols", "need at least one map symbol")
        if kind == "anosov_perturbed_cat":
            base = _need(maps, "base_matrix", list, "maps")
            self._check_matrix(base, "maps.base_matrix")
            cap = float(maps.get("amplitude_cap", 0.1))
            if cap <= 0:
                raise ConfigError("maps.amplitude_cap", "cap must be positive")
            for i, sym in enumerate(symbols):
                for j, sh in enumerate(sym.get("shears", [])):
                    p = f"maps.symbols[{i}].shears[{j}]"
                    freq = _need(sh, "freq", list, p)
                    if len(freq) != 2 or not all(
                            isinstance(f, int) for f in freq):
                        raise ConfigError(f"{p}.freq",
                                          "frequency must be two integers")
                    vec = _need(sh, "vec", list, p)
                    if len(vec) != 2:
                        raise ConfigError(f"{p}.vec", "vector must have length 2")
                    amp = float(_need(sh, "amplitude", (int, float), p))
                    if abs(amp) > cap:
                        raise ConfigError(f"{p}.amplitude",
                                          f"|{amp}| exceeds amplitude_cap {cap}")
        else:
            for i, sym in enumerate(symbols):
                pieces = _need(sym, "pieces", list, f"maps.symbols[{i}]")
                if not pieces:
                    raise ConfigError(f"maps.symbols[{i}].pieces",
                                      "piecewise map needs pieces")
                for j, pc in enumerate(pieces):
                    self._check_matrix(
                        _need(pc, "matrix", list, f"maps.symbols[{i}].pieces[{j}]"),
                        f"maps.symbols[{i}].pieces[{j}].matrix")

        driving = _need(raw, "driving", dict, "")
        dist = _need(driving, "distribution", list, "driving")
        if len(dist) != len(symbols):
            raise ConfigError("driving.distribution",
                              f"length {len(dist)} != number of map symbols "
                              f"{len(symbols)}")
        total = float(sum(dist))
        if abs(total - 1.0) > 1e-9:
            raise ConfigError("driving.distribution",
                              f"must sum to 1, got {total}")
        if any(p <= 0 for p in dist):
            raise ConfigError("driving.distribution",
                              "every symbol needs positive probability")

        obs = _need(raw, "observable", dict, "")
        osym = _need(obs, "symbols", list, "observable")
        if len(osym) != len(symbols):
            raise ConfigError("observable.symbols",
                              "one coefficient table per map symbol required")
        if all(not s.get("terms") for s in osym):
            allow = obs.get("allow_zero", False)
            if not allow:
                raise ConfigError("observable.symbols",
                                  "observable is empty; set observable.allow_zero "
                                  "= true for the zero observable")
        centering = obs.get("centering", "lebesgue")
        if centering not in ("lebesgue", "operator", "none"):
            raise ConfigError("observable.centering",
                              f"unknown centering mode {centering!r}")
        for i, sym in enumerate(osym):
            for j, t in enumerate(sym.get("terms", [])):
                p = f"observable.symbols[{i}].terms[{j}]"
                freq = _need(t, "freq", list, p)
                if len(freq) != 2 or not all(isinstance(f, int) for f in freq):
                    raise ConfigError(f"{p}.freq",
                                      "frequency must be two integers")

        grid = _need(raw, "grid", dict, "")
        k = _need(grid, "k", int, "grid")
        if k < 2:
            raise ConfigError("grid.k", f"need k >= 2, got {k}")
        spc = grid.get("samples_per_cell", 256)
        if not isinstance(spc, int) or spc < 1:
            raise ConfigError("grid.samples_per_cell", "need a positive integer")

        theta = _need(raw, "theta", dict, "")
        tmax = float(_need(theta, "max", (int, float), "theta"))
        if tmax <= 0:
            raise ConfigError("theta.max", f"theta window must be positive, got {tmax}")
        if int(theta.get("points", 21)) < 5:
            raise ConfigError("theta.points", "need at least 5 grid points")
        fd = float(theta.get("fd_step", 0.02))
        if not 0 < 2 * fd <= tmax:
            raise ConfigError("theta.fd_step",
                              "finite-difference step must satisfy 0 < 2h <= max")

        tg = raw.get("t_grid", {})
        if tg:
            tmin, tmax2 = float(tg.get("min", 0.5)), float(tg.get("max", 2.0))
            if tmin <= 0 or tmax2 < tmin:
                raise ConfigError("t_grid", "need 0 < min <= max (0 is excluded)")
            if int(tg.get("points", 7)) < 1:
                raise ConfigError("t_grid.points", "need at least one point")

        eps = raw.get("eps", {})
        if eps:
            mode = eps.get("mode", "relative")
            if mode not in ("relative", "absolute"):
                raise ConfigError("eps.mode", f"unknown mode {mode!r}")
            vals = eps.get("values", [])
            if any(v <= 0 for v in vals):
                raise ConfigError("eps.values", "deviation sizes must be positive")

        gates = raw.get("gates", {})
        if float(gates.get("variance_floor", 0.01)) < 0:
            raise ConfigError("gates.variance_floor", "floor must be nonnegative")

        for name, plan in raw.get("plans", {}).items():
            if "n_samples" in plan:
                ns = plan["n_samples"]
                if not isinstance(ns, int) or ns < 100:
                    raise ConfigError(f"plans.{name}.n_samples",
                                      "need an integer >= 100")
                bc = plan.get("batch_count", 10)
                if ns % bc:
                    raise ConfigError(f"plans.{name}.batch_count",
                                      f"{bc} does not divide n_samples {ns}")

    @staticmethod
    def _check_matrix(m, path: str) -> None:
        if (not isinstance(m, list) or len(m) != 2
                or any(len(r) != 2 for r in m)
                or any(not isinstance(v, int) for r in m for v in r)):
            raise ConfigError(path, "must be a 2x2 integer matrix")
        det = m[0][0] * m[1][1] - m[0][1] * m[1][0]
        if abs(det) != 1:
            raise ConfigError(path, f"determinant must be +-1, got {det}")
        if abs(m[0][0] + m[1][1]) <= 2:
            raise ConfigError(path, "matrix is not hyperbolic (|trace| <= 2)")

    # -- typed accessors ------------------------------------------------------

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    @property
    def version(self) -> str:
        return _VERSION

    def plan(self, name: str) -> dict:
        return dict(self.raw.get("plans", {}).get(name, {}))

    @property
    def variance_floor(self) -> float:
        return float(self.raw.get("gates", {}).get("variance_floor", 0.01))

    @property
    def grid_k(self) -> int:
        return int(self.raw["grid"]["k"])

    @property
    def samples_per_cell(self) -> int:
        return int(self.raw["grid"].get("samples_per_cell", 256))

    def theta_grid_values(self) -> tuple[float, int, float]:
        th = self.raw["theta"]
        return (float(th["max"]), int(th.get("points", 21)),
                float(th.get("fd_step", 0.02)))

    def t_grid_values(self) -> list[float]:
        tg = self.raw.get("t_grid", {"min": 0.5, "max": 2.0, "points": 7})
        pts = int(tg.get("points", 7))
        if pts == 1:
            return [float(tg.get("min", 0.5))]
        return [float(v) for v in np.linspace(float(tg.get("min", 0.5)),
                                              float(tg.get("max", 2.0)), pts)]

    def eps_spec(self) -> tuple[str, list[float]]:
        eps = self.raw.get("eps", {"mode": "relative",
                                   "values": [0.1, 0.15, 0.2]})
        return eps.get("mode", "relative"), [float(v) for v in
                                             eps.get("values", [])]


# ---------------------------------------------------------------------------
# materializers
# ---------------------------------------------------------------------------

def build_family(cfg: ExperimentConfig) -> MapFamily:
    maps_cfg = cfg.raw["maps"]
    kind = maps_cfg["kind"]
    out = []
    for sym in maps_cfg["symbols"]:
        if kind == "anosov_perturbed_cat":
            shears = tuple(
                ShearTerm(freq=tuple(sh["freq"]), vec=tuple(float(v) for v in sh["vec"]),
                          amplitude=float(sh["amplitude"]))
                for sh in sym.get("shears", []))
            out.append(HyperbolicMap(
                kind=kind,
                base_matrix=tuple(tuple(r) for r in maps_cfg["base_matrix"]),
                shears=shears,
                amplitude_cap=float(maps_cfg.get("amplitude_cap", 0.1))))
        else:
            pieces = tuple(
                PiecewisePiece(
                    matrix=tuple(tuple(r) for r in pc["matrix"]),
                    constraints=tuple(tuple(float(v) for v in c)
                                      for c in pc["constraints"]),
                    offset=tuple(float(v) for v in pc.get("offset", (0.0, 0.0))))
                for pc in sym["pieces"])
            out.append(HyperbolicMap(kind=kind, pieces=pieces))
    return MapFamily(maps=tuple(out))


def build_observable(cfg: ExperimentConfig) -> Observable:
    """The raw (uncentered) observable; centering is applied by the caller."""
    sym_terms = []
    for sym in cfg.raw["observable"]["symbols"]:
        terms = tuple(
            ObservableTerm(freq=tuple(t["freq"]),
                           cos_coeff=float(t.get("cos", 0.0)),
                           sin_coeff=float(t.get("sin", 0.0)))
            for t in sym.get("terms", []))
        sym_terms.append(terms)
    return Observable(terms=tuple(sym_terms))


def build_omega(cfg: ExperimentConfig) -> OmegaPath:
    driving = cfg.raw["driving"]
    return OmegaPath(seed=derive_key(cfg.seed, "driving"),
                     alphabet_size=len(driving["distribution"]),
                     distribution=tuple(float(p) for p in
                                        driving["distribution"]))


def centering_mode(cfg: ExperimentConfig) -> str:
    return cfg.raw["observable"].get("centering", "lebesgue")


def module_seed(cfg: ExperimentConfig, label: str) -> int:
    return derive_key(cfg.seed, label)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def standard_config_dict(seed: int = 12345) -> dict:
    """Two-symbol volume-preserving family: bare cat plus a sheared cat.

    The shear moves only the second coordinate, so Lebesgue is the exact
    fiber measure and the trigonometric observable is exactly centered.
    """
    return {
        "seed": seed,
        "maps": {
            "kind": "anosov_perturbed_cat",
            "base_matrix": [[2, 1], [1, 1]],
            "amplitude_cap": 0.1,
            "symbols": [
                {"shears": []},
                {"shears": [{"freq": [1, 0], "vec": [0.0, 1.0],
                             "amplitude": 0.03}]},
            ],
        },
        "driving": {"distribution": [0.5, 0.5]},
        "observable": {
            "centering": "lebesgue",
            "symbols": [
                {"terms": [{"freq": [1, 0], "cos": 1.0}]},
                {"terms": [{"freq": [1, 0], "cos": 1.0},
                           {"freq": [0, 1], "sin": 0.5}]},
            ],
        },
        "grid": {"k": 64, "samples_per_cell": 256},
        "theta": {"max": 1.0, "points": 41, "fd_step": 0.02},
        "t_grid": {"min": 0.5, "max": 2.0, "points": 7},
        "eps": {"mode": "relative", "values": [0.2, 0.5]},
        "gates": {"variance_floor": 0.01},
        "plans": {
            "moment": {"n_fibers": 400, "n_pullback": 50, "batch_count": 10},
            "lambda_mc": {"n": 400, "n_samples": 20000, "batch_count": 10,
                          "thetas": [-0.1, -0.05, 0.05, 0.1]},
            "variance": {"n_max": 30, "n_samples": 100000, "n": 2000,
                         "batch_count": 10, "agreement_rtol": 0.10},
            "density": {"n_pullback": 50, "decay_n_max": 40},
            "spectrum": {"n_steps": 500, "r": 2, "reorth_period": 10},
            "aperiodicity": {"n": 60},
            "clt": {"n": 2000, "n_samples": 100000, "batch_count": 10,
                    "ks_max": 0.02},
            "ldp": {"n_list": [200, 400, 800], "n_samples": 1000000,
                    "batch_count": 10, "min_tail": 50,
                    "final_rtol": 0.25},
            "lclt": {"n": 2000, "n_samples": 1000000, "batch_count": 10,
                     "interval_rel": 0.5, "s_points": 9,
                     "residual_max": 0.15},
        },
        "output": {"directory": "out", "workers": 0},
        "sampling": {"burn_in": 0},
    }


def dissipative_config_dict(seed: int = 12346) -> dict:
    """Both symbols dissipative; the equivariant densities are nonuniform."""
    cfg = standard_config_dict(seed)
    cfg["maps"]["symbols"] = [
        {"shears": [{"freq": [1, 0], "vec": [1.0, 0.0], "amplitude": 0.05}]},
        {"shears": [{"freq": [0, 1], "vec": [0.0, 1.0], "amplitude": 0.04}]},
    ]
    cfg["observable"]["centering"] = "operator"
    cfg["sampling"]["burn_in"] = 30
    return cfg


def coboundary_config_dict(seed: int = 12347) -> dict:
    """Observable of the form r - r o tau with r = cos(2 pi x1).

    The first image coordinate is symbol-independent for the standard
    family, so the difference is one fixed trigonometric polynomial and the
    asymptotic variance vanishes.
    """
    cfg = standard_config_dict(seed)
    terms = [{"freq": [1, 0], "cos": 1.0}, {"freq": [2, 1], "cos": -1.0}]
    cfg["observable"]["symbols"] = [{"terms": list(terms)},
                                    {"terms": list(terms)}]
    cfg["theta"]["max"] = 0.2
    return cfg


def lattice_config_dict(seed: int = 12348) -> dict:
    """Constant observable in the 2 pi lattice: the arithmetic counterexample.

    exp(i t g) is a constant phase at every t, so the twisted matrices keep
    spectral radius one and the aperiodicity diagnostic must fail.
    """
    cfg = standard_config_dict(seed)
    term = {"freq": [0, 0], "cos": float(2.0 * np.pi)}
    cfg["observable"]["symbols"] = [{"terms": [dict(term)]},
                                    {"terms": [dict(term)]}]
    cfg["observable"]["centering"] = "none"
    cfg["t_grid"] = {"min": 0.5, "max": 2.0, "points": 4}
    return cfg


def constant_path_config_dict(seed: int = 12349) -> dict:
    """Single-symbol family driven by the constant path (deterministic case)."""
    cfg = standard_config_dict(seed)
    cfg["maps"]["symbols"] = [{"shears": []}]
    cfg["driving"]["distribution"] = [1.0]
    cfg["observable"]["symbols"] = [{"terms": [{"freq": [1, 0], "cos": 1.0}]}]
    cfg["grid"]["k"] = 32
    return cfg
