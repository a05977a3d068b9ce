import math
from fractions import Fraction
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from openevt.errors import ConvergenceError, InconsistentClassificationError, UnsupportedModeError
from openevt.interval_maps import (Branch, IntervalSet, OpenSystem, PiecewiseExpandingMap,
                                   doubling_map, preimage_set, tent_map)
from openevt.ulam import (ball_set, build_operator, build_partition, check_hole_smallness,
                          check_operator_closeness, escape_rate, evd_operator_curve,
                          leading_eigs, perturbed_eigenvalue_curve, spectral_solution)

import oracles

ALPHA = oracles.golden_alpha()
THETA = oracles.theta_periodic(ALPHA, 2, 4.0)


def _smooth_map():
    # quadratic perturbations of the doubling branches, still full and expanding
    f0 = lambda x: 2 * x + 0.4 * x * (0.5 - x)  # noqa: E731
    d0 = lambda x: 2 + 0.4 * (0.5 - 2 * x)  # noqa: E731
    f1 = lambda x: 2 * x - 1 + 0.4 * (x - 0.5) * (1 - x)  # noqa: E731
    d1 = lambda x: 2 + 0.4 * (1.5 - 2 * x)  # noqa: E731
    return PiecewiseExpandingMap([Branch(0, Fraction(1, 2), func=f0, deriv=d0),
                                  Branch(Fraction(1, 2), 1, func=f1, deriv=d1)], "smooth")


# -- partitions -----------------------------------------------------------------


def test_markov_partition_for_golden_mean(golden):
    p = build_partition(golden, 4, markov_mode=True)
    assert list(p.breakpoints) == [0, 0.25, 0.5, 0.75, 1.0]
    assert p.markov


def test_uniform_partition_inserts_hole_endpoints():
    sys_ = OpenSystem(doubling_map(), IntervalSet.of((0.3, 0.35)))
    p = build_partition(sys_, 4096)
    assert {0.3, 0.35} <= set(p.breakpoints)
    assert p.k == 4096 + 2
    t = OpenSystem(tent_map(), IntervalSet.of((0.3, 0.35)))
    assert {0.3, 0.35, 0.5} <= set(build_partition(t, 8).breakpoints)


def test_markov_mode_needs_affine_map():
    sys_ = OpenSystem(_smooth_map(), IntervalSet.of((0.0, 0.25)))
    with pytest.raises(UnsupportedModeError):
        build_partition(sys_, 16, markov_mode=True)


# -- operators ------------------------------------------------------------------


def test_golden_density_action(golden, golden_small):
    part, _ = golden_small
    m = build_operator(golden, part, "open").matrix.toarray()
    # mass rows on equal-width bins: density action is the transpose
    action = m[1:, 1:].T
    np.testing.assert_allclose(action, oracles.GOLDEN_MATRIX, atol=0)
    np.testing.assert_allclose(action, oracles.brute_force_density_action(), atol=1e-12)


@pytest.mark.parametrize("tmap", [doubling_map(), tent_map(), _smooth_map()], ids=["doubling", "tent", "smooth"])
def test_closed_rows_conserve_mass(tmap):
    sys_ = OpenSystem(tmap, IntervalSet.of((0.1, 0.2)))
    op = build_operator(sys_, build_partition(sys_, 257), "closed")
    np.testing.assert_allclose(op.row_sums, 1.0, atol=1e-10)


def test_open_operator_mass_identity(golden, golden_part):
    op = build_operator(golden, golden_part, "open")
    rng = np.random.default_rng(1)
    p = rng.random(golden_part.k)
    x0 = golden_part.overlap_fraction(golden.x0)
    assert op.push(p).sum() == pytest.approx(float(np.sum(p * x0)), rel=1e-12)


def test_empty_ball_perturbation_equals_open(golden, golden_small):
    part, _ = golden_small
    a = build_operator(golden, part, "open").matrix
    b = build_operator(golden, part, "target_perturbed", IntervalSet.empty()).matrix
    assert (a != b).nnz == 0


# -- eigendata ------------------------------------------------------------------


def test_golden_eigendata_small(golden_small):
    part, sol = golden_small
    assert sol.alpha == pytest.approx(ALPHA, abs=1e-10)
    h = sol.h0[1:] / sol.h0[1]
    np.testing.assert_allclose(h, oracles.golden_eigvec(), atol=1e-10)


def test_golden_eigendata_fine(golden_sol):
    sol = golden_sol
    assert sol.alpha == pytest.approx(ALPHA, abs=1e-10)
    assert sol.lambda_weights.sum() == pytest.approx(1.0)
    assert sol.mu0.sum() == pytest.approx(1.0)
    assert sol.h_minus > 0 and sol.gap > 0
    inside = sol.partition.breakpoints[1:] <= 0.25
    assert np.all(sol.mu0[inside] <= 1e-10)


def test_integral_of_h0_is_inverse_alpha(golden_sol):
    assert golden_sol.h0_mass.sum() == pytest.approx(1 / ALPHA, abs=1e-8)


def test_closed_doubling_is_lebesgue():
    sys_ = OpenSystem(doubling_map(), IntervalSet.empty(), allow_closed=True)
    sol = spectral_solution(sys_, build_partition(sys_, 64))
    assert sol.alpha == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(sol.h0, 1.0, atol=1e-10)
    np.testing.assert_allclose(sol.mu0, 1 / 64, atol=1e-12)


def test_no_positive_entry_is_a_convergence_error(golden, golden_small):
    part, _ = golden_small
    op = build_operator(golden, part, "target_perturbed", IntervalSet.full())
    with pytest.raises(ConvergenceError):
        leading_eigs(op)


def test_eigenvalue_matches_survivor_decay(golden, golden_sol):
    from openevt.interval_maps import survivor_approx
    r = survivor_approx(golden, 17).measure / survivor_approx(golden, 16).measure
    assert r == pytest.approx(golden_sol.alpha, abs=1e-6)


# -- measure identities (Markov-affine mode) -------------------------------------


def _pair_blocks(rng, k):
    # functions constant on aligned pairs of bins, so w∘T is constant on every bin
    return np.repeat(rng.random(k // 2), 2)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_duality(golden, golden_sol, seed):
    sol, part = golden_sol, golden_sol.partition
    rng = np.random.default_rng(seed)
    v = rng.random(part.k)
    w = _pair_blocks(rng, part.k)
    mids = 0.5 * (part.breakpoints[:-1] + part.breakpoints[1:])
    w_t = w[part.locate(golden.map.apply(mids))]
    lv = sol.operator.push(v * part.widths) / part.widths
    lhs = np.sum(lv * w * sol.mu0)
    rhs = sol.alpha * np.sum(v * w_t * sol.mu0)
    assert lhs == pytest.approx(rhs, rel=1e-8, abs=1e-14)


def test_conformality(golden, golden_sol):
    sol, part = golden_sol, golden_sol.partition
    k = part.k
    worst = 0.0
    for i in range(k // 4, k):
        j = (2 * i) % k
        lhs = sol.mu0[j] + sol.mu0[j + 1]
        rhs = sol.alpha * 2.0 * sol.mu0[i]
        worst = max(worst, abs(lhs - rhs))
    assert worst <= 1e-8 * sol.mu0.max()


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(0, 2047), min_size=1, max_size=40, unique=True))
def test_lambda_invariance(golden, golden_sol, blocks):
    sol, k = golden_sol, golden_sol.partition.k
    a = IntervalSet(tuple((2 * b / k, (2 * b + 2) / k) for b in blocks))
    pre = preimage_set(golden.map, a)
    idx = []
    for lo, hi in pre:
        idx.extend(range(int(round(lo * k)), int(round(hi * k))))
    lhs = sol.lambda_weights[idx].sum()
    rhs = sum(sol.lambda_weights[2 * b] + sol.lambda_weights[2 * b + 1] for b in blocks)
    assert lhs == pytest.approx(rhs, abs=1e-6)


# -- diagnostics ------------------------------------------------------------------


def test_operator_closeness_bounded_by_hole(golden, golden_small):
    part, _ = golden_small
    fine = build_partition(golden, 1024)
    assert check_operator_closeness(golden, fine) <= 0.25 + 1e-8
    closed = OpenSystem(doubling_map(), IntervalSet.empty(), allow_closed=True)
    assert check_operator_closeness(closed, fine) == 0.0


def test_operator_closeness_monotone_in_hole():
    small = OpenSystem(doubling_map(), IntervalSet.of((0.25, 0.375)))
    big = OpenSystem(doubling_map(), IntervalSet.of((0.25, 0.5)))
    assert check_operator_closeness(small, build_partition(small, 512)) <= \
        check_operator_closeness(big, build_partition(big, 512))


def test_hole_smallness_gate(golden_sol):
    assert check_hole_smallness(golden_sol, 2.0, 1.1)
    assert not check_hole_smallness(SimpleNamespace(alpha=0.4), 2.0, 1.1)
    assert check_hole_smallness(SimpleNamespace(alpha=1.0), 2.0, 1.5)


def test_escape_rate_values():
    assert escape_rate(1.0) == 0.0
    assert escape_rate(0.5) == pytest.approx(math.log(2))
    assert escape_rate(ALPHA) == pytest.approx(math.log(2) - math.log(oracles.PHI))
    with pytest.raises(ValueError):
        escape_rate(0.0)


# -- perturbed spectrum ------------------------------------------------------------


def test_perturbed_slopes_tend_to_theta(golden, golden_sol):
    radii = [2.0 ** -e for e in range(6, 15)]
    ps = perturbed_eigenvalue_curve(golden, golden_sol, golden_sol.partition, Fraction(1, 3), radii,
                                    on_survivor=True)
    assert np.all(ps.lambda_n <= golden_sol.alpha)
    assert np.all(np.diff(ps.lambda_n) >= -1e-14)
    theta, _ = ps.extrapolate()
    assert theta == pytest.approx(THETA, rel=0.05)


def test_ball_inside_hole_leaves_alpha_unchanged(golden, golden_sol):
    radii = [0.1, 0.05, 0.01]
    ps = perturbed_eigenvalue_curve(golden, golden_sol, golden_sol.partition, 0.1, radii)
    assert np.all(ps.lambda_n == golden_sol.alpha)
    assert np.all(ps.delta_n == 0.0)


def test_massless_ball_contradicts_survivor_claim(golden, golden_sol):
    with pytest.raises(InconsistentClassificationError):
        perturbed_eigenvalue_curve(golden, golden_sol, golden_sol.partition, 0.1, [0.05], on_survivor=True)


def test_operator_curve_without_target_removal(golden, golden_sol):
    # a ball inside the hole removes nothing: the curve is ν(X_{n-1})/α^{n-1} = 1
    curve = evd_operator_curve(golden, golden_sol, golden_sol.partition, 0.1, [3.0, 4.0], [10, 50])
    np.testing.assert_allclose(curve, 1.0, atol=1e-9)


def test_operator_curve_periodic_limit(golden, golden_sol):
    from openevt.extremes import boundary_levels
    lv = boundary_levels(golden_sol, golden_sol.partition, Fraction(1, 3), 1.0, [1000])
    curve = evd_operator_curve(golden, golden_sol, golden_sol.partition, 1 / 3, lv.u_values, lv.n_values)
    assert curve[0] == pytest.approx(math.exp(-THETA), abs=0.02)


def test_ball_set_clips_to_unit_interval():
    assert ball_set(0.05, 0.1).components == ((0.0, pytest.approx(0.15)),)
