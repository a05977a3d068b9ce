import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from openevt.errors import BallTooLargeError, ClassificationMismatchError, FormulaDomainError
from openevt.extremes import (ball_mass, boundary_levels, degenerate_probe, distance_estimate,
                              first_disjoint_n, fit_gumbel_counts, h0_oscillation, level_radius,
                              observable_phi, operator_evd, return_ratios, return_sets,
                              theta_formula, theta_from_escape_rate, theta_gumbel)
from openevt.interval_maps import IntervalSet, TargetSpec, classify_target
from openevt.ulam import ball_set, evd_operator_curve

import oracles

ALPHA = oracles.golden_alpha()
THETA = oracles.theta_periodic(ALPHA, 2, 4.0)
THIRD = Fraction(1, 3)


def test_observable_phi():
    assert observable_phi(0.5, 0.25) == pytest.approx(math.log(4))
    assert observable_phi(0.25, 0.25) == math.inf
    np.testing.assert_allclose(observable_phi(np.array([0.0, 1.0]), 0.5), [math.log(2)] * 2)


# -- boundary levels --------------------------------------------------------------


def test_levels_hit_target_mass(golden_sol):
    lv = boundary_levels(golden_sol, golden_sol.partition, THIRD, 1.0, [10, 100, 1000, 10 ** 5])
    np.testing.assert_allclose(lv.masses * np.array(lv.n_values), 1.0, rtol=1e-6)
    assert np.all(np.diff(lv.u_values) > 0)


def test_level_radius_off_support(golden_sol):
    # Λ lives on X_inf, whose closest point to 0.1 is 1/3
    assert level_radius(golden_sol, 0.1, 1e-3) > 1 / 3 - 0.1
    assert ball_mass(golden_sol, 0.1, 0.2) == 0.0


def test_lambda_ball_at_tiny_radius_scales_like_cylinders(golden_sol):
    # Λ(B(1/3, r)) ~ r^{t0} with t0 = log φ / log 2
    r1, r2 = 2.0 ** -40, 2.0 ** -80
    slope = math.log(ball_mass(golden_sol, THIRD, r2) / ball_mass(golden_sol, THIRD, r1)) / math.log(r2 / r1)
    assert slope == pytest.approx(oracles.golden_t0(), abs=0.01)


# -- theta formula ----------------------------------------------------------------


def test_theta_formula_golden(golden):
    spec = classify_target(golden, THIRD)
    assert theta_formula(spec, ALPHA, 4.0) == pytest.approx((math.sqrt(5) - 1) / 2, abs=1e-15)
    assert theta_formula(spec, ALPHA, 4.0) == pytest.approx(THETA, abs=1e-15)


def test_theta_formula_other_classes():
    assert theta_formula(TargetSpec(0.3, "nonperiodic"), 0.8) == 1.0
    assert math.isnan(theta_formula(TargetSpec(0.1, "off_survivor"), 0.8))


def test_theta_formula_domain():
    with pytest.raises(FormulaDomainError):
        theta_formula(TargetSpec(2 / 3, "periodic", period=1), 0.5, 2.0)


@given(st.floats(0.55, 1.0), st.integers(1, 6))
def test_escape_rate_form_agrees(alpha, p):
    spec = TargetSpec(0.3, "periodic", period=p)
    deriv = 2.0 ** p
    a = theta_formula(spec, alpha, deriv)
    b = theta_from_escape_rate(spec, -math.log(alpha), deriv)
    assert a == pytest.approx(b, abs=1e-12)


# -- Gumbel regression -------------------------------------------------------------


def test_gumbel_fit_recovers_exact_law():
    tau = [0.5, 1.0, 2.0]
    n_surv = 10 ** 7
    below = np.round(n_surv * np.exp(-0.6 * np.array(tau)))
    fit = fit_gumbel_counts(tau, below, n_surv, 32)
    assert fit.theta == pytest.approx(0.6, abs=1e-6)
    assert fit.intercept == pytest.approx(0.0, abs=1e-6)
    assert 0 < fit.stderr < 1e-3


def test_gumbel_mc_matches_operator_at_same_levels(golden, golden_sol):
    n, tau = 8, [0.5, 1.0, 2.0]
    g = theta_gumbel(golden, golden_sol, THIRD, n, tau, 400_000, seed=3)
    p_op = []
    for t in tau:
        lv = boundary_levels(golden_sol, golden_sol.partition, THIRD, t, [n])
        p_op.append(operator_evd(golden, golden_sol, golden_sol.partition, THIRD, lv)[0])
    se = np.sqrt(g.p * (1 - g.p) / g.survivors)
    assert np.all(np.abs(g.p - np.array(p_op)) <= 4 * se)


# -- return ratios -------------------------------------------------------------------


def test_return_sets_structure(golden):
    ball = ball_set(1 / 3, 1e-3)
    sets = return_sets(golden, ball, 3)
    # k = 0 asks for an immediate return: 1/3 maps to 2/3, far from the ball
    assert sets[0].measure == 0.0
    assert sets[1].measure > 0


def test_return_ratios_golden(golden, golden_sol):
    radii = [2.0 ** -e for e in range(8, 15)]
    rr = return_ratios(golden, golden_sol, golden_sol.partition, THIRD, 2, 8, radii)
    assert rr.r_k[1] == pytest.approx(2 - oracles.PHI, abs=1e-6)
    assert np.all(np.delete(rr.r_k, 1) == 0.0)
    assert rr.theta_ret == pytest.approx(THETA, abs=1e-6)
    assert rr.identity_residual <= 1e-6
    assert np.all(rr.r_kn.sum(axis=0) <= 1 + 1e-12)
    assert rr.stable


def test_return_ratios_ball_too_large(golden, golden_sol):
    with pytest.raises(BallTooLargeError):
        return_ratios(golden, golden_sol, golden_sol.partition, THIRD, 2, 4, [0.2])


# -- degenerate branch ------------------------------------------------------------------


def test_first_disjoint_n_matches_oracle(golden):
    d = oracles.survivor_distance(0.1, 20)
    n_hat = first_disjoint_n(golden, 0.1, 20)
    assert n_hat == math.floor(1 / d) + 1 or (1 / n_hat <= d < 1 / (n_hat - 1))


def test_degenerate_probe(golden, golden_sol):
    spec = classify_target(golden, 0.1)
    ns = (10, 100, 1000, 10 ** 4)
    probe = degenerate_probe(golden, golden_sol, golden_sol.partition, 0.1, ns, spec)
    assert probe.n_hat == 5
    assert np.all(probe.lambda_n == golden_sol.alpha)
    big = np.array(ns) >= 10 * probe.n_hat
    assert np.all(probe.curve[big] >= 0.99)


def test_degenerate_probe_refuses_survivor_targets(golden, golden_sol):
    spec = classify_target(golden, THIRD)
    with pytest.raises(ClassificationMismatchError):
        degenerate_probe(golden, golden_sol, golden_sol.partition, THIRD, (10,), spec)


def test_distance_estimate(golden, golden_sol):
    est = distance_estimate(golden, golden_sol, golden_sol.partition, 0.1,
                            classify_target(golden, 0.1), 20)
    assert est.exact == pytest.approx(oracles.survivor_distance(0.1, 20), abs=1e-15)
    assert est.exact / 4 <= est.estimate <= 4 * est.exact


def test_operator_curve_equals_one_beyond_n_hat(golden, golden_sol):
    n_hat = first_disjoint_n(golden, 0.1, 20)
    ns = [10 * n_hat, 100 * n_hat]
    curve = evd_operator_curve(golden, golden_sol, golden_sol.partition, 0.1,
                               [math.log(n) for n in ns], ns)
    np.testing.assert_allclose(curve, 1.0, atol=1e-6)


def test_h0_is_flat_near_a_survivor_point(golden_sol):
    assert h0_oscillation(golden_sol, 1 / 3) < 1e-9
    assert np.isnan(h0_oscillation(golden_sol, 0.1))


def test_boundary_levels_reject_nonincreasing_n(golden_sol):
    with pytest.raises(ValueError):
        boundary_levels(golden_sol, golden_sol.partition, THIRD, 1.0, [100, 10])


def test_empty_ball_has_no_returns(golden):
    assert all(s.measure == 0 for s in return_sets(golden, IntervalSet.empty(), 3))
