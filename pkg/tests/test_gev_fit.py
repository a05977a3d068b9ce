import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from openevt.errors import DegenerateSampleError, InsufficientDataError, OffSupportError
from openevt.gev_fit import (block_maxima, dimension_from_masses, fit_gev, local_dimension,
                             maxima_from_minima, normalizing_sequences, sample_l_moments)
from openevt.interval_maps import IntervalSet, OpenSystem, doubling_map
from openevt.open_dynamics import conditioned_minima
from openevt.ulam import build_partition, spectral_solution

import oracles


@settings(max_examples=40)
@given(arrays(float, st.integers(5, 60), elements=st.floats(-1e3, 1e3)))
def test_l_moments_match_direct_definition(x):
    if np.ptp(x) == 0:
        return
    a = sample_l_moments(x)
    b = oracles.l_moments_direct(x)
    assert a[0] == pytest.approx(b[0], rel=1e-9, abs=1e-9)
    assert a[1] == pytest.approx(b[1], rel=1e-9, abs=1e-9)
    if b[1] > 1e-6:
        assert a[2] == pytest.approx(b[2], rel=1e-6, abs=1e-9)


@pytest.mark.parametrize("shape", [-0.2, 0.0, 0.3])
def test_fit_recovers_synthetic_gev(shape):
    rng = np.random.default_rng(17)
    x = stats.genextreme.rvs(-shape, loc=2.0, scale=0.5, size=20000, random_state=rng)
    fit = fit_gev(x)
    assert fit.shape == pytest.approx(shape, abs=0.03)
    assert fit.location == pytest.approx(2.0, abs=0.03)
    assert fit.scale == pytest.approx(0.5, abs=0.02)
    assert fit.ks < 0.02
    c, loc, scale = stats.genextreme.fit(x)
    assert fit.shape == pytest.approx(-c, abs=0.05)


def test_gumbel_flag():
    rng = np.random.default_rng(1)
    assert not fit_gev(rng.gumbel(size=5000)).gumbel_flag
    assert fit_gev(stats.genextreme.rvs(-0.4, size=5000, random_state=rng)).gumbel_flag


def test_fit_needs_enough_distinct_finite_maxima():
    with pytest.raises(InsufficientDataError):
        fit_gev(np.arange(100.0))
    with pytest.raises(DegenerateSampleError):
        fit_gev(np.ones(300))
    with pytest.raises(DegenerateSampleError):
        fit_gev(np.r_[np.arange(299.0), np.inf])


def test_block_maxima():
    trajs = [np.linspace(0.1, 0.9, 20), np.full(10, 0.5)]
    m = block_maxima(trajs, 0.5, 16)
    assert len(m) == 1
    assert m[0] == pytest.approx(-math.log(np.min(np.abs(trajs[0][:16] - 0.5))))
    with pytest.raises(ValueError):
        block_maxima(trajs, 0.5, 8)
    with pytest.raises(InsufficientDataError):
        block_maxima([np.zeros(5)], 0.5, 16)


def test_iid_uniform_normalization():
    # min of n iid uniforms distance to an interior z: P(M_n <= u) = (1 - 2e^{-u})^n
    rng = np.random.default_rng(5)
    fits, ns = [], [64, 256, 1024]
    for n in ns:
        d = np.abs(rng.random((4000, n)) - 0.4).min(axis=1)
        fits.append(fit_gev(maxima_from_minima(d)))
    seq = normalizing_sequences(fits, ns)
    np.testing.assert_allclose(seq.a_n, 1.0, atol=0.05)
    np.testing.assert_allclose(seq.b_n - np.log(ns), math.log(2), atol=0.06)


def test_closed_doubling_block_maxima():
    sys_ = OpenSystem(doubling_map(), IntervalSet.empty(), allow_closed=True)
    sol = spectral_solution(sys_, build_partition(sys_, 64))
    n = 256
    d = conditioned_minima(sys_, sol, 0.3, n, 5000, seed=2)
    fit = fit_gev(maxima_from_minima(d))
    assert 1 / fit.scale == pytest.approx(1.0, abs=0.08)
    assert fit.location - math.log(n) == pytest.approx(math.log(2), abs=0.1)


# -- local dimension -----------------------------------------------------------------


@given(st.floats(0.1, 3.0))
def test_dimension_of_exact_power_law(t0):
    u = np.linspace(5, 50, 20)
    est = dimension_from_masses(u, np.exp(-t0 * u))
    assert est.t0_hat == pytest.approx(t0, rel=1e-9)
    assert est.atom_flag == (t0 < 0.05)


def test_dimension_flags_atoms_and_zero_mass():
    u = np.linspace(5, 50, 10)
    assert dimension_from_masses(u, np.full(10, 0.3)).atom_flag
    with pytest.raises(OffSupportError):
        dimension_from_masses(u, np.r_[np.ones(9), 0.0])


def test_fdd_bound():
    u = np.array([1.0, 2.0, 3.0])
    est = dimension_from_masses(u, np.exp(-0.5 * u), n_values=[10, 100, 1000])
    assert est.fdd_bound == pytest.approx(np.max(u - np.log([10, 100, 1000]) / 0.5))


def test_local_dimension_golden(golden_sol):
    est = local_dimension(golden_sol, golden_sol.partition, Fraction(1, 3), np.linspace(5, 200, 40))
    assert est.t0_hat == pytest.approx(oracles.golden_t0(), abs=0.01)
    assert est.hd_lower_bound == est.t0_hat


def test_local_dimension_without_hole():
    sys_ = OpenSystem(doubling_map(), IntervalSet.empty(), allow_closed=True)
    sol = spectral_solution(sys_, build_partition(sys_, 4096, markov_mode=True))
    est = local_dimension(sol, sol.partition, Fraction(1, 3), np.linspace(5, 200, 40))
    assert est.t0_hat == pytest.approx(1.0, abs=0.02)
