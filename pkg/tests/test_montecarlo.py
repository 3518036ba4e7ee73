import numpy as np
import pytest
from scipy import stats

from conftest import make_plan
from qcl.dynamics import Observable
from qcl.errors import AperiodicityRefusal, DegenerateVarianceError
from qcl.montecarlo import (SamplePlan, birkhoff_sums, empirical_variance,
                            ldp_required_samples, sample_mu_omega, verify_clt,
                            verify_ldp, verify_lclt)
from qcl.operator import UlamGrid, equivariant_density
from qcl.spectral import aperiodicity_diagnostic


def test_sample_plan_validation():
    with pytest.raises(ValueError):
        SamplePlan(seed=1, n_samples=50)
    with pytest.raises(ValueError):
        SamplePlan(seed=1, n_samples=1000, batch_count=7)
    with pytest.raises(ValueError):
        SamplePlan(seed=1, n_samples=1000, burn_in=-1)


# ---------------------------------------------------------------------------
# fiber-measure sampling
# ---------------------------------------------------------------------------

def test_mu_sampling_uniform_for_volume_preserving(std_family, std_omega):
    plan = make_plan(seed=51, n_samples=100000, burn_in=0)
    x = sample_mu_omega(std_family, std_omega, plan)
    tol = 3.0 / np.sqrt(12.0 * plan.n_samples)
    assert abs(x[0].mean() - 0.5) < tol
    assert abs(x[1].mean() - 0.5) < tol


def test_mu_sampling_burnin_invariance_volume_preserving(std_family,
                                                         std_omega):
    x0 = sample_mu_omega(std_family, std_omega, make_plan(52, 50000, 0))
    x5 = sample_mu_omega(std_family, std_omega, make_plan(52, 50000, 5))
    ks = stats.ks_2samp(x0[0], x5[0]).statistic
    assert ks < 0.015


def test_mu_sampling_matches_operator_density(diss_cocycle, diss_family,
                                              diss_omega):
    plan = make_plan(seed=53, n_samples=1000000, burn_in=30)
    x = sample_mu_omega(diss_family, diss_omega, plan)
    grid = UlamGrid(32)
    hist = np.bincount(grid.cell_index(x), minlength=grid.n_cells)
    hist = hist / hist.sum()
    coarse = equivariant_density(diss_cocycle, diss_omega, 50,
                                 early_stop=None).aggregate_to(grid)
    assert np.abs(hist - coarse.weights).sum() < 0.1


def test_sampling_deterministic(std_family, std_omega):
    a = sample_mu_omega(std_family, std_omega, make_plan(54, 1000, 3))
    b = sample_mu_omega(std_family, std_omega, make_plan(54, 1000, 3))
    assert np.array_equal(a, b)


def test_checkpointed_sums_consistent(std_family, std_omega, std_g):
    x = sample_mu_omega(std_family, std_omega, make_plan(55, 1000, 0))
    sums = birkhoff_sums(std_family, std_g, std_omega, x, 100,
                         checkpoints=[0, 40, 100])
    assert np.all(sums[0] == 0.0)
    direct = birkhoff_sums(std_family, std_g, std_omega, x, 40)[40]
    assert np.array_equal(sums[40], direct)


# ---------------------------------------------------------------------------
# CLT
# ---------------------------------------------------------------------------

def test_clt_refuses_zero_observable(std_family, std_omega):
    with pytest.raises(DegenerateVarianceError):
        verify_clt(std_family, Observable.zero(2), std_omega,
                   make_plan(61, 10000, 0, 200), sigma2=0.0)


def test_clt_small_scale(std_family, std_omega, std_g):
    rep = verify_clt(std_family, std_g, std_omega,
                     make_plan(62, 20000, 0, 400), sigma2=0.5635)
    assert rep.ks_stat < 0.03
    assert len(rep.batch_ks) == 10


def test_clt_deterministic_report(std_family, std_omega, std_g):
    r1 = verify_clt(std_family, std_g, std_omega, make_plan(63, 5000, 0, 100),
                    sigma2=0.5635)
    r2 = verify_clt(std_family, std_g, std_omega, make_plan(63, 5000, 0, 100),
                    sigma2=0.5635)
    assert r1.to_dict() == r2.to_dict()


# ---------------------------------------------------------------------------
# LDP
# ---------------------------------------------------------------------------

def test_ldp_planner_demand():
    assert ldp_required_samples(0.0, 100) == 51
    assert ldp_required_samples(0.02, 400, 50) == int(50 * np.exp(8.0)) + 1


def test_ldp_small_eps_rate_near_zero(std_family, std_omega, std_g):
    rep = verify_ldp(std_family, std_g, std_omega, [0.01], [100, 200],
                     make_plan(64, 100000, 0), rate=lambda e: 1e-4)
    for cell in rep.cells:
        assert not cell.flagged
        assert cell.empirical_rate < 0.02


def test_ldp_zero_count_flagged(std_family, std_omega, std_g):
    # deviation far beyond reach of n = 200 with tiny sample budget
    rep = verify_ldp(std_family, std_g, std_omega, [2.0], [200],
                     make_plan(65, 1000, 0), rate=lambda e: 2.0)
    cell = rep.cells[0]
    assert cell.flagged and cell.tail_count == 0
    assert cell.empirical_rate is None and cell.tail_prob is None
    assert cell.required_samples > 10 ** 9


def test_ldp_tail_monotone_in_eps(std_family, std_omega, std_g):
    plan = make_plan(66, 200000, 0)
    eps = [0.05, 0.1, 0.15, 0.2]
    rep = verify_ldp(std_family, std_g, std_omega, eps, [200], plan,
                     rate=lambda e: e * e)
    probs = [c.tail_prob for c in rep.cells]
    assert all(a >= b for a, b in zip(probs, probs[1:]))


# ---------------------------------------------------------------------------
# LCLT
# ---------------------------------------------------------------------------

def _passing_aperiodicity(std_cocycle, std_omega):
    return aperiodicity_diagnostic(std_cocycle, std_omega, [1.0], n=30)


def test_lclt_gaussian_tail_vanishes(std_cocycle, std_family, std_omega,
                                     std_g):
    ap = _passing_aperiodicity(std_cocycle, std_omega)
    sigma2 = 0.5635
    n = 400
    s_far = 7.0 * np.sqrt(n * sigma2)
    rep = verify_lclt(std_family, std_g, std_omega,
                      make_plan(67, 50000, 0, n), (-0.2, 0.2), [s_far],
                      sigma2, ap)
    assert rep.empirical[0] < 1e-6
    assert rep.predicted[0] < 1e-6


def test_lclt_refuses_failed_aperiodicity(std_family, std_omega, std_g):
    class Failing:
        all_pass = False

        def failing_t(self):
            return [1.0]

    with pytest.raises(AperiodicityRefusal):
        verify_lclt(std_family, std_g, std_omega, make_plan(68, 1000, 0, 100),
                    (-0.2, 0.2), [0.0], 0.5, Failing())


def test_lclt_refuses_degenerate_variance(std_cocycle, std_family, std_omega,
                                          std_g):
    ap = _passing_aperiodicity(std_cocycle, std_omega)
    with pytest.raises(DegenerateVarianceError):
        verify_lclt(std_family, std_g, std_omega, make_plan(69, 1000, 0, 100),
                    (-0.2, 0.2), [0.0], 0.001, ap)


def test_lclt_small_scale(std_cocycle, std_family, std_omega, std_g):
    ap = _passing_aperiodicity(std_cocycle, std_omega)
    sigma2 = 0.5635
    n = 400
    sig = np.sqrt(sigma2)
    s_vals = np.linspace(-2 * sig * np.sqrt(n), 2 * sig * np.sqrt(n), 5)
    rep = verify_lclt(std_family, std_g, std_omega,
                      make_plan(70, 200000, 0, n), (-sig / 4, sig / 4),
                      s_vals, sigma2, ap)
    assert rep.relative_residual < 0.1


# ---------------------------------------------------------------------------
# empirical variance
# ---------------------------------------------------------------------------

def test_empirical_variance_zero_observable(std_family, std_omega):
    var, se = empirical_variance(std_family, Observable.zero(2), std_omega,
                                 make_plan(71, 1000, 0, 100))
    assert var == 0.0 and se == 0.0


def test_empirical_variance_coboundary_vanishes(cob_cfg):
    from qcl.config import build_family, build_observable, build_omega
    fam, om = build_family(cob_cfg), build_omega(cob_cfg)
    raw = build_observable(cob_cfg)
    g = raw.with_offsets(raw.lebesgue_means())
    var, _ = empirical_variance(fam, g, om, make_plan(72, 20000, 0, 2000))
    assert var < 0.01


def test_empirical_variance_agrees_with_series(std_family, std_omega, std_g):
    from qcl.spectral import variance_series
    var, _ = empirical_variance(std_family, std_g, std_omega,
                                make_plan(73, 50000, 0, 1000))
    vs = variance_series(std_family, std_g, std_omega, 30,
                         make_plan(74, 100000, 0))
    assert abs(var - vs.value) <= 0.10 * max(var, vs.value)


# ---------------------------------------------------------------------------
# piecewise boundary rejection
# ---------------------------------------------------------------------------

def test_mu_sampling_counts_boundary_rejections():
    from qcl.dynamics import HyperbolicMap, MapFamily, OmegaPath, PiecewisePiece
    # deliberately leave a thin uncovered band so the resampler has work
    gap_map = HyperbolicMap(kind="piecewise_toral", pieces=(
        PiecewisePiece(matrix=((2, 1), (1, 1)), constraints=((0.0, 1.0, 0.5),)),
        PiecewisePiece(matrix=((3, 2), (1, 1)), constraints=((0.0, -1.0, -0.52),)),
    ))
    fam = MapFamily((gap_map,))
    om = OmegaPath.constant(0, alphabet_size=1, distribution=(1.0,))
    plan = make_plan(seed=75, n_samples=20000, burn_in=2)
    x, rejected = sample_mu_omega(fam, om, plan, return_rejections=True)
    assert rejected > 0
    assert np.all((x >= 0.0) & (x < 1.0))
