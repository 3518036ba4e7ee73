"""Reproducible experiment driver.

    qcl <subcommand> --config <path> [--set key=value ...] [--workers N] [--out DIR]

Subcommands: density, spectrum, lambda, rate, variance, aperiodicity,
verify-clt, verify-ldp, verify-lclt, all. Exit codes: 0 all executed checks
passed, 1 a check failed its tolerance, 2 invalid configuration, 3 gate
refusal (degenerate variance or failed aperiodicity; verdict still written).

Report bodies carry no timestamps, so identical (seed, config) runs emit
byte-identical files; wall-clock timings live only in the run manifest,
which is written last.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as cfgmod
from . import montecarlo, spectral
from .config import ExperimentConfig
from .errors import (AperiodicityRefusal, ConfigError, DegenerateVarianceError,
                     QclError, RateWindowError)
from .montecarlo import SamplePlan
from .operator import (UlamCocycle, UlamGrid, equivariant_density, fit_decay,
                       lyapunov_spectrum, pullback_decay_profile,
                       estimate_centering)

SUBCOMMANDS = ("density", "spectrum", "lambda", "rate", "variance",
               "aperiodicity", "verify-clt", "verify-ldp", "verify-lclt", "all")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_REFUSED = 0, 1, 2, 3


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.17g}"
    return str(x)


def write_csv(path: Path, header: list[str], rows: list[tuple]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def make_mapper(workers: int):
    if workers == 0:
        workers = os.cpu_count() or 1
    if workers <= 1:
        return map

    def mapper(fn, items):
        items = list(items)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return mapper


class Pipeline:
    """Shared lazily-computed state for one CLI invocation."""

    def __init__(self, cfg: ExperimentConfig, outdir: Path, workers: int):
        self.cfg = cfg
        self.outdir = outdir
        self.mapper = make_mapper(workers)
        self.family = cfgmod.build_family(cfg)
        self.omega = cfgmod.build_omega(cfg)
        self.burn_in = int(cfg.raw.get("sampling", {}).get("burn_in", 0))
        self._g = None
        self._centering_info = None
        self._cocycle = None
        self._moment = None
        self._sigma2 = None
        self._rate = None
        self._aperiodicity = None

    # -- lazy intermediates --------------------------------------------------

    @property
    def g(self):
        if self._g is None:
            raw_g = cfgmod.build_observable(self.cfg)
            mode = cfgmod.centering_mode(self.cfg)
            if mode == "lebesgue":
                offsets = raw_g.lebesgue_means()
                info = {"mode": mode, "offsets": list(offsets),
                        "residual_max": 0.0}
            elif mode == "operator":
                plain = UlamCocycle(self.family, UlamGrid(self.cfg.grid_k),
                                    self.cfg.samples_per_cell,
                                    seed=cfgmod.module_seed(self.cfg, "ulam"))
                est = estimate_centering(plain, self.omega, raw_g)
                offsets = est["offsets"]
                info = {"mode": mode, **est, "offsets": list(offsets)}
            else:
                offsets = tuple(0.0 for _ in range(raw_g.n_symbols))
                info = {"mode": mode, "offsets": list(offsets)}
            self._g = raw_g.with_offsets(offsets)
            self._centering_info = info
        return self._g

    @property
    def cocycle(self) -> UlamCocycle:
        if self._cocycle is None:
            self._cocycle = UlamCocycle(
                self.family, UlamGrid(self.cfg.grid_k),
                self.cfg.samples_per_cell,
                seed=cfgmod.module_seed(self.cfg, "ulam"), g=self.g)
        return self._cocycle

    @property
    def moment(self) -> spectral.MomentFunction:
        if self._moment is None:
            tmax, points, fd = self.cfg.theta_grid_values()
            grid = spectral.ThetaGrid.build(tmax, points, fd)
            plan = self.cfg.plan("moment")
            self._moment = spectral.moment_function_operator(
                self.cocycle, self.omega, grid,
                n_fibers=int(plan.get("n_fibers", 400)),
                n_pullback=int(plan.get("n_pullback", 50)),
                batch_count=int(plan.get("batch_count", 10)),
                mapper=self.mapper)
        return self._moment

    @property
    def sigma2(self) -> tuple[float, float]:
        if self._sigma2 is None:
            _, _, fd = self.cfg.theta_grid_values()
            self._sigma2 = spectral.variance_from_lambda(self.moment, fd)
        return self._sigma2

    def eps_values(self) -> list[float]:
        mode, values = self.cfg.eps_spec()
        if mode == "absolute":
            return values
        sigma = float(np.sqrt(max(self.sigma2[0], 0.0)))
        return [v * sigma for v in values]

    @property
    def rate(self) -> spectral.RateFunction:
        if self._rate is None:
            self._rate = spectral.rate_function(self.moment, self.eps_values())
        return self._rate

    @property
    def aperiodicity(self) -> spectral.AperiodicityReport:
        if self._aperiodicity is None:
            plan = self.cfg.plan("aperiodicity")
            self._aperiodicity = spectral.aperiodicity_diagnostic(
                self.cocycle, self.omega, self.cfg.t_grid_values(),
                n=int(plan.get("n", 60)), mapper=self.mapper)
        return self._aperiodicity

    def sample_plan(self, name: str, **defaults) -> SamplePlan:
        plan = {**defaults, **self.cfg.plan(name)}
        return SamplePlan(
            seed=cfgmod.module_seed(self.cfg, f"plan/{name}"),
            n_samples=int(plan.get("n_samples", 10000)),
            burn_in=int(plan.get("burn_in", self.burn_in)),
            n_steps=int(plan.get("n", 1000)),
            batch_count=int(plan.get("batch_count", 10)))

    def meta(self) -> dict:
        return {"config_hash": self.cfg.hash, "version": self.cfg.version,
                "seed": self.cfg.seed}


# ---------------------------------------------------------------------------
# subcommands: each returns (passed, refused, files, summary)
# ---------------------------------------------------------------------------

def run_density(p: Pipeline):
    plan = p.cfg.plan("density")
    n_pull = int(plan.get("n_pullback", 50))
    n_max = int(plan.get("decay_n_max", 40))
    h0 = equivariant_density(p.cocycle, p.omega, n_pull, early_stop=None)
    # same pullback depth at the shifted fiber, so the gap measures the
    # truncation-induced equivariance defect rather than retracing h0
    h1 = equivariant_density(p.cocycle, p.omega.shifted(1), n_pull,
                             early_stop=None)
    pushed = p.cocycle.push_op(p.omega.symbol(0)) @ h0.weights
    equivariance_gap = float(np.abs(pushed - h1.weights).sum())
    profile = pullback_decay_profile(p.cocycle, p.omega, n_max)
    fit = fit_decay(profile)

    f_dens = p.outdir / "density.csv"
    h0.write_csv(f_dens)
    f_decay = p.outdir / "density_decay.csv"
    write_csv(f_decay, ["n", "l1_gap"], profile)

    nonneg = bool(h0.min_weight() >= 0.0)
    mass_ok = bool(abs(h0.mass() - 1.0) < 1e-12)
    decay_ok = bool(fit["converged"] or fit["slope"] < 0.0)
    passed = nonneg and mass_ok and decay_ok
    summary = {"nonnegative": nonneg, "mass_one": mass_ok,
               "equivariance_gap": equivariance_gap, "decay_fit": fit,
               "centering": p._centering_info, "passed": passed}
    f_sum = p.outdir / "density_summary.json"
    write_json(f_sum, {**p.meta(), **summary})
    return passed, False, [f_dens, f_decay, f_sum], summary


def run_spectrum(p: Pipeline):
    plan = p.cfg.plan("spectrum")
    rep = lyapunov_spectrum(
        p.cocycle, p.omega, n_steps=int(plan.get("n_steps", 500)),
        r=int(plan.get("r", 2)),
        reorth_period=int(plan.get("reorth_period", 10)),
        seed=cfgmod.module_seed(p.cfg, "spectrum"))
    lam1_tol = float(plan.get("lambda1_tol", 0.01))
    lam2_max = float(plan.get("lambda2_max", -0.05))
    lam = rep.exponents
    passed = bool(abs(lam[0]) <= lam1_tol
                  and (len(lam) < 2 or lam[1] < lam2_max))
    f_csv = p.outdir / "spectrum.csv"
    write_csv(f_csv, ["rank", "exponent"],
              [(i + 1, float(v)) for i, v in enumerate(lam)])
    summary = {**rep.to_dict(), "passed": passed}
    f_sum = p.outdir / "spectrum_summary.json"
    write_json(f_sum, {**p.meta(), **summary})
    return passed, False, [f_csv, f_sum], summary


def run_lambda(p: Pipeline):
    mom = p.moment
    rows = [(float(t), float(v), float(se), "operator")
            for t, v, se in zip(mom.theta, mom.values, mom.std_err)]
    plan = p.cfg.plan("lambda_mc")
    mc_rows, agree = [], []
    if plan:
        mc_plan = p.sample_plan("lambda_mc", n_samples=20000)
        for theta in plan.get("thetas", []):
            val, se = spectral.lambda_theta_montecarlo(
                p.family, p.g, p.omega, float(theta),
                int(plan.get("n", 400)), mc_plan)
            mc_rows.append((float(theta), val, se, "montecarlo"))
            op_val = mom.value_at(float(theta))
            op_se = mom.stderr_at(float(theta))
            tol = max(3.0 * (se + op_se), 0.01)
            agree.append({"theta": float(theta), "operator": op_val,
                          "montecarlo": val, "tol": tol,
                          "ok": bool(abs(val - op_val) <= tol)})
    f_csv = p.outdir / "lambda.csv"
    write_csv(f_csv, ["theta", "lambda", "std_err", "method"], rows + mc_rows)
    convexity = mom.convexity_defect()
    passed = bool(mom.value_at(0.0) == 0.0 and convexity >= 0.0
                  and all(a["ok"] for a in agree))
    summary = {"lambda_zero": mom.value_at(0.0), "convexity_defect": convexity,
               "estimator_agreement": agree, "passed": passed}
    f_sum = p.outdir / "lambda_summary.json"
    write_json(f_sum, {**p.meta(), **summary})
    return passed, False, [f_csv, f_sum], summary


def run_rate(p: Pipeline):
    try:
        rf = p.rate
    except RateWindowError as exc:
        f_sum = p.outdir / "rate_summary.json"
        write_json(f_sum, {**p.meta(), "error": str(exc), "passed": False})
        return False, False, [f_sum], {"error": str(exc)}
    rows = list(zip(rf.eps, rf.c, rf.theta_star))
    f_csv = p.outdir / "rate.csv"
    write_csv(f_csv, ["eps", "c", "theta_star"], rows)
    c, th = rf.c, rf.theta_star
    passed = bool(np.all(c >= 0.0) and np.all(np.diff(c) > 0.0)
                  and np.all(np.diff(th) >= 0.0))
    summary = {"eps": [float(v) for v in rf.eps],
               "c": [float(v) for v in c],
               "theta_star": [float(v) for v in th],
               "window_max_eps": rf.window_max_eps, "passed": passed}
    f_sum = p.outdir / "rate_summary.json"
    write_json(f_sum, {**p.meta(), **summary})
    return passed, False, [f_csv, f_sum], summary


def run_variance(p: Pipeline):
    plan = p.cfg.plan("variance")
    rtol = float(plan.get("agreement_rtol", 0.10))
    s2_lam, s2_lam_se = p.sigma2
    _, _, fd = p.cfg.theta_grid_values()
    s2_half, _ = spectral.variance_from_lambda(p.moment, fd / 2.0)

    vs = spectral.variance_series(
        p.family, p.g, p.omega, int(plan.get("n_max", 30)),
        p.sample_plan("variance", n_samples=100000))
    emp_plan = p.sample_plan("variance", n_samples=100000)
    s2_emp, s2_emp_se = montecarlo.empirical_variance(
        p.family, p.g, p.omega, emp_plan)

    values = {"from_lambda": s2_lam, "series": vs.value, "empirical": s2_emp}
    floor = p.cfg.variance_floor
    degenerate = all(v < floor for v in values.values())
    if degenerate:
        agreements, passed = [], True
    else:
        scale = max(abs(v) for v in values.values())
        pairs = [("from_lambda", "series"), ("from_lambda", "empirical"),
                 ("series", "empirical")]
        agreements = [{
            "pair": [a, b],
            "rel_gap": abs(values[a] - values[b]) / scale,
            "ok": bool(abs(values[a] - values[b]) <= rtol * scale),
        } for a, b in pairs]
        passed = all(a["ok"] for a in agreements)
    summary = {
        "sigma2_from_lambda": s2_lam, "sigma2_from_lambda_stderr": s2_lam_se,
        "sigma2_from_lambda_halfstep": s2_half,
        "sigma2_series": vs.value, "sigma2_series_stderr": vs.std_err,
        "sigma2_empirical": s2_emp, "sigma2_empirical_stderr": s2_emp_se,
        "series_terms": [float(v) for v in vs.terms],
        "agreements": agreements, "degenerate": degenerate,
        "variance_floor": floor, "passed": passed,
    }
    f_sum = p.outdir / "variance.json"
    write_json(f_sum, {**p.meta(), **summary})
    return passed, False, [f_sum], summary


def run_aperiodicity(p: Pipeline):
    rep = p.aperiodicity
    f_csv = p.outdir / "aperiodicity.csv"
    write_csv(f_csv, ["t", "slope", "radius", "verdict"],
              [(r["t"], r["slope"], r["radius"], r["verdict"])
               for r in rep.to_rows()])
    plan = p.cfg.plan("aperiodicity")
    ly = None
    k_coarse = int(plan.get("ly_coarse_k", 16))
    if plan.get("ly_probe", True) and p.cfg.grid_k % k_coarse == 0 \
            and p.cfg.grid_k > k_coarse:
        sweep = spectral.twisted_lasota_yorke_sweep(
            p.cocycle, p.omega, p.cfg.t_grid_values(),
            n_grid=tuple(range(int(plan.get("ly_n_max", 8)) + 1)),
            k_coarse=k_coarse)
        ly = {
            "per_t": {f"{t:g}": f.to_dict()
                      for t, f in sweep["fits"].items()},
            "sup_strong_coef": sweep["sup_strong_coef"],
            "sup_weak_coef": sweep["sup_weak_coef"],
            "sup_rate": sweep["sup_rate"],
            "all_ok": sweep["all_ok"],
        }
    summary = {"rows": rep.to_rows(), "all_pass": rep.all_pass,
               "twisted_ly": ly, "passed": rep.all_pass}
    f_sum = p.outdir / "aperiodicity_summary.json"
    write_json(f_sum, {**p.meta(), **summary})
    return rep.all_pass, False, [f_csv, f_sum], summary


def _refusal(p: Pipeline, name: str, exc: QclError):
    payload = {**p.meta(), "refused": True, "reason": str(exc),
               "verdict": ("degenerate-variance"
                           if isinstance(exc, DegenerateVarianceError)
                           else "aperiodicity-failed"),
               "passed": False}
    f = p.outdir / f"{name}_verdict.json"
    write_json(f, payload)
    return False, True, [f], payload


def run_verify_clt(p: Pipeline):
    plan = p.cfg.plan("clt")
    ks_max = float(plan.get("ks_max", 0.02))
    try:
        rep = montecarlo.verify_clt(p.family, p.g, p.omega,
                                    p.sample_plan("clt", n_samples=100000),
                                    p.sigma2[0], p.cfg.variance_floor)
    except DegenerateVarianceError as exc:
        return _refusal(p, "clt", exc)
    passed = bool(rep.ks_stat < ks_max)
    summary = {**rep.to_dict(), "ks_max": ks_max, "passed": passed}
    f_sum = p.outdir / "clt.json"
    write_json(f_sum, {**p.meta(), **summary})
    return passed, False, [f_sum], summary


def run_verify_ldp(p: Pipeline):
    plan = p.cfg.plan("ldp")
    final_rtol = float(plan.get("final_rtol", 0.25))
    try:
        if p.sigma2[0] < p.cfg.variance_floor:
            raise DegenerateVarianceError(p.sigma2[0], p.cfg.variance_floor)
        rf = p.rate
    except DegenerateVarianceError as exc:
        return _refusal(p, "ldp", exc)
    except RateWindowError as exc:
        f = p.outdir / "ldp_summary.json"
        write_json(f, {**p.meta(), "error": str(exc), "passed": False})
        return False, False, [f], {"error": str(exc)}
    n_list = [int(n) for n in plan.get("n_list", [200, 400, 800])]
    rep = montecarlo.verify_ldp(
        p.family, p.g, p.omega, p.eps_values(), n_list,
        p.sample_plan("ldp", n_samples=1000000), rf.value,
        min_tail=int(plan.get("min_tail", 50)))
    f_csv = p.outdir / "ldp.csv"
    write_csv(f_csv,
              ["eps", "n", "tail_count", "tail_prob", "empirical_rate",
               "predicted_rate", "required_samples", "flagged"],
              [(c.eps, c.n, c.tail_count,
                c.tail_prob if c.tail_prob is not None else "",
                c.empirical_rate if c.empirical_rate is not None else "",
                c.predicted_rate, c.required_samples, c.flagged)
               for c in rep.cells])
    checks = []
    for eps in sorted(set(c.eps for c in rep.cells)):
        cells = [c for c in rep.cells if c.eps == eps]
        residuals = [abs(c.empirical_rate - c.predicted_rate)
                     if c.empirical_rate is not None else None
                     for c in cells]
        usable = [r for r in residuals if r is not None]
        decreasing = (len(usable) == len(residuals) >= 2
                      and all(b <= a for a, b in zip(usable, usable[1:])))
        final = cells[-1]
        final_ok = (not final.flagged and final.empirical_rate is not None
                    and final.predicted_rate > 0
                    and abs(final.empirical_rate - final.predicted_rate)
                    <= final_rtol * final.predicted_rate)
        checks.append({"eps": eps, "residuals": residuals,
                       "decreasing": bool(decreasing),
                       "final_ok": bool(final_ok),
                       "flagged_cells": sum(c.flagged for c in cells)})
    passed = all(c["decreasing"] and c["final_ok"] for c in checks)
    summary = {**rep.to_dict(), "checks": checks, "passed": passed}
    f_sum = p.outdir / "ldp_summary.json"
    write_json(f_sum, {**p.meta(), **summary})
    return passed, False, [f_csv, f_sum], summary


def run_verify_lclt(p: Pipeline):
    plan = p.cfg.plan("lclt")
    res_max = float(plan.get("residual_max", 0.15))
    try:
        sigma2 = p.sigma2[0]
        sigma = float(np.sqrt(max(sigma2, 0.0)))
        n = int(plan.get("n", 2000))
        half = 0.5 * float(plan.get("interval_rel", 0.5)) * sigma
        s_pts = int(plan.get("s_points", 9))
        s_vals = np.linspace(-3.0 * sigma * np.sqrt(n), 3.0 * sigma * np.sqrt(n),
                             s_pts)
        rep = montecarlo.verify_lclt(
            p.family, p.g, p.omega, p.sample_plan("lclt", n_samples=1000000),
            (-half, half), s_vals, sigma2, p.aperiodicity,
            p.cfg.variance_floor)
    except (DegenerateVarianceError, AperiodicityRefusal) as exc:
        return _refusal(p, "lclt", exc)
    passed = bool(rep.relative_residual < res_max)
    summary = {**rep.to_dict(), "residual_max": res_max, "passed": passed}
    f_sum = p.outdir / "lclt.json"
    write_json(f_sum, {**p.meta(), **summary})
    return passed, False, [f_sum], summary


_RUNNERS = {
    "density": run_density,
    "spectrum": run_spectrum,
    "lambda": run_lambda,
    "rate": run_rate,
    "variance": run_variance,
    "aperiodicity": run_aperiodicity,
    "verify-clt": run_verify_clt,
    "verify-ldp": run_verify_ldp,
    "verify-lclt": run_verify_lclt,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="qcl",
        description="quenched cocycle laboratory: run one experiment stage")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="TOML or JSON config")
    parser.add_argument("--set", action="append", default=[], dest="overrides",
                        metavar="KEY=VALUE", help="dotted config override")
    parser.add_argument("--workers", type=int, default=None,
                        help="worker pool size (0 = logical cores)")
    parser.add_argument("--out", default=None, help="output directory")
    args = parser.parse_args(argv)

    try:
        raw = cfgmod.load_config_dict(args.config)
        raw = cfgmod.apply_overrides(raw, args.overrides)
        if "QCL_SEED" in os.environ:
            raw["seed"] = int(os.environ["QCL_SEED"])
        cfg = ExperimentConfig(raw)
    except ConfigError as exc:
        print(f"qcl: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"qcl: cannot load config: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    outdir = Path(args.out or cfg.raw.get("output", {}).get("directory", "out"))
    outdir.mkdir(parents=True, exist_ok=True)
    workers = args.workers
    if workers is None:
        workers = int(cfg.raw.get("output", {}).get("workers", 0))

    pipeline = Pipeline(cfg, outdir, workers)
    names = (list(_RUNNERS) if args.subcommand == "all"
             else [args.subcommand])

    manifest_entries = {}
    any_failed = False
    any_refused = False
    for name in names:
        t0 = time.perf_counter()
        passed, refused, files, _ = _RUNNERS[name](pipeline)
        manifest_entries[name] = {
            "files": [str(f.name) for f in files],
            "passed": passed,
            "refused": refused,
            "wall_time_s": round(time.perf_counter() - t0, 3),
        }
        status = "refused" if refused else ("pass" if passed else "FAIL")
        print(f"qcl: {name}: {status}")
        any_failed |= (not passed and not refused)
        any_refused |= refused

    manifest = {
        "config_hash": cfg.hash,
        "version": cfg.version,
        "seed": cfg.seed,
        "subcommands": manifest_entries,
        "summary": {"failed": any_failed, "refused": any_refused},
    }
    write_json(outdir / "manifest.json", manifest)

    if any_refused:
        return EXIT_REFUSED
    if any_failed:
        return EXIT_CHECK_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
