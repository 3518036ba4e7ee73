"""Shared fixtures: the standard two-symbol family and its discretizations.

Session scope keeps the expensive k = 64 matrix builds and the operator
moment function shared across test modules and the acceptance suite.
"""

from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from qcl.config import (ExperimentConfig, build_family, build_observable,
                        build_omega, coboundary_config_dict,
                        dissipative_config_dict, module_seed,
                        standard_config_dict)
from qcl.montecarlo import SamplePlan
from qcl.operator import UlamCocycle, UlamGrid
from qcl.spectral import ThetaGrid, moment_function_operator


@pytest.fixture(scope="session")
def std_cfg():
    return ExperimentConfig(standard_config_dict(seed=20250810))


@pytest.fixture(scope="session")
def std_family(std_cfg):
    return build_family(std_cfg)


@pytest.fixture(scope="session")
def std_omega(std_cfg):
    return build_omega(std_cfg)


@pytest.fixture(scope="session")
def std_g(std_cfg):
    raw = build_observable(std_cfg)
    return raw.with_offsets(raw.lebesgue_means())


@pytest.fixture(scope="session")
def std_cocycle(std_cfg, std_family, std_g):
    return UlamCocycle(std_family, UlamGrid(64), 256,
                       seed=module_seed(std_cfg, "ulam"), g=std_g)


@pytest.fixture(scope="session")
def std_cocycle_k32(std_cfg, std_family, std_g):
    return UlamCocycle(std_family, UlamGrid(32), 256,
                       seed=module_seed(std_cfg, "ulam"), g=std_g)


@pytest.fixture(scope="session")
def std_theta_grid(std_cfg):
    tmax, points, fd = std_cfg.theta_grid_values()
    return ThetaGrid.build(tmax, points, fd)


@pytest.fixture(scope="session")
def std_moment(std_cocycle, std_omega, std_theta_grid):
    return moment_function_operator(std_cocycle, std_omega, std_theta_grid,
                                    n_fibers=400, n_pullback=50)


@pytest.fixture(scope="session")
def diss_cfg():
    return ExperimentConfig(dissipative_config_dict(seed=20250811))


@pytest.fixture(scope="session")
def diss_family(diss_cfg):
    return build_family(diss_cfg)


@pytest.fixture(scope="session")
def diss_omega(diss_cfg):
    return build_omega(diss_cfg)


@pytest.fixture(scope="session")
def diss_cocycle(diss_cfg, diss_family):
    return UlamCocycle(diss_family, UlamGrid(64), 256,
                       seed=module_seed(diss_cfg, "ulam"))


@pytest.fixture(scope="session")
def cob_cfg():
    return ExperimentConfig(coboundary_config_dict(seed=20250812))


def make_plan(seed=1, n_samples=10000, burn_in=0, n_steps=400, batch_count=10):
    return SamplePlan(seed=seed, n_samples=n_samples, burn_in=burn_in,
                      n_steps=n_steps, batch_count=batch_count)
