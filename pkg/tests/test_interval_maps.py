from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from openevt.errors import AmbiguousPointError
from openevt.interval_maps import (IntervalSet, OpenSystem, as_fraction, classify_target,
                                   derivative_at, doubling_map, markov_closure,
                                   orbit_derivative, preimage_set, singular_set_distance,
                                   survivor_approx, tent_map)

import oracles


def _close_sets(a: IntervalSet, b: IntervalSet, tol=1e-15):
    assert len(a) == len(b), (a, b)
    for (p, q), (r, s) in zip(a, b):
        assert p == pytest.approx(r, abs=tol) and q == pytest.approx(s, abs=tol)


# -- interval algebra --------------------------------------------------------


def test_interval_set_normalizes_touching_pieces():
    s = IntervalSet.of((0.5, 0.75), (0.25, 0.5), (0.8, 0.9))
    assert s.components == ((0.25, 0.75), (0.8, 0.9))
    assert s.measure == pytest.approx(0.6)


def test_complement_and_membership():
    s = IntervalSet.of((0.0, 0.25))
    assert (~s).components == ((0.25, 1.0),)
    assert 0.0 in s and 0.25 not in s and 0.3 in ~s
    assert (~s).contains(1.0)


intervals = st.lists(
    st.tuples(st.floats(0, 1), st.floats(0, 1)).map(lambda t: (min(t), max(t))).filter(lambda t: t[1] > t[0]),
    max_size=6).map(lambda ps: IntervalSet(tuple(ps)))


@given(intervals, intervals)
def test_set_algebra_measures(a, b):
    assert (a | b).measure == pytest.approx(a.measure + b.measure - (a & b).measure, abs=1e-12)
    assert (a - b).measure == pytest.approx(a.measure - (a & b).measure, abs=1e-12)
    assert (a & ~a).measure == 0.0


def test_as_fraction_reads_decimals():
    assert as_fraction(0.3) == Fraction(3, 10)
    assert as_fraction("1/3") == Fraction(1, 3)


# -- maps and preimages -------------------------------------------------------


def test_doubling_preimage_examples():
    t = doubling_map()
    _close_sets(preimage_set(t, IntervalSet.of((0.0, 0.5))), IntervalSet.of((0.0, 0.25), (0.5, 0.75)))
    _close_sets(preimage_set(t, IntervalSet.of((0.25, 0.5))), IntervalSet.of((0.125, 0.25), (0.625, 0.75)))
    _close_sets(preimage_set(t, IntervalSet.full()), IntervalSet.full())


@settings(max_examples=50)
@given(intervals)
def test_doubling_preimage_preserves_lebesgue(s):
    assert preimage_set(doubling_map(), s).measure == pytest.approx(s.measure, abs=1e-12)


def test_exact_rational_orbit():
    t = doubling_map()
    z = Fraction(1, 3)
    assert t(z) == Fraction(2, 3) and t(t(z)) == z
    assert orbit_derivative(t, z, 2) == 4.0


odd_fractions = st.integers(1, 500).flatmap(
    lambda m: st.integers(0, 2 * m).map(lambda a: Fraction(a, 2 * m + 1)))


@given(odd_fractions, st.integers(2, 8), st.data())
def test_orbit_derivative_chain_rule(x, p, data):
    # odd denominators never reach the tent map's turning point 1/2
    t = tent_map()
    k = data.draw(st.integers(1, p - 1))
    xk = x
    for _ in range(k):
        xk = t(xk)
    assert orbit_derivative(t, x, p) == orbit_derivative(t, x, k) * orbit_derivative(t, xk, p - k)


def test_derivative_at_boundary_is_ambiguous():
    with pytest.raises(AmbiguousPointError):
        derivative_at(doubling_map(), 0.5)


# -- survivor sets ----------------------------------------------------------


def test_survivor_approx_first_levels(golden):
    assert survivor_approx(golden, 0).components == ((0.25, 1.0),)
    _close_sets(survivor_approx(golden, 1), IntervalSet.of((0.25, 0.5), (0.625, 1.0)))


def test_survivor_approx_matches_binary_words(golden):
    for depth in (3, 8, 12):
        lo, w = oracles.survivor_cover(depth)
        xn = survivor_approx(golden, depth)
        assert xn.measure == pytest.approx(len(lo) * w, abs=1e-14)
        grid = (np.arange(2000) + 0.5) / 2000
        ref = np.zeros_like(grid, dtype=bool)
        for a in lo:
            ref |= (grid >= a) & (grid < a + w)
        assert all(xn.contains(x) == r for x, r in zip(grid, ref))


def test_survivor_sets_are_nested(golden):
    prev = survivor_approx(golden, 0)
    for n in range(1, 12):
        cur = survivor_approx(golden, n)
        assert cur.issubset(prev)
        prev = cur


def test_survivor_measure_ratio_tends_to_alpha(golden):
    ratios = [survivor_approx(golden, n + 1).measure / survivor_approx(golden, n).measure for n in (16, 17)]
    assert ratios[-1] == pytest.approx(oracles.golden_alpha(), abs=1e-6)


# -- classification -----------------------------------------------------------


def test_classify_golden_targets(golden):
    assert classify_target(golden, Fraction(1, 3), p_max=8).label() == "periodic(2)"
    assert classify_target(golden, 0.1).kind == "off_survivor"
    # binary 0.110110110... = 6/7 repeats "110", a period-3 orbit
    assert classify_target(golden, Fraction(6, 7)).label() == "periodic(3)"
    num, den = oracles.fibonacci_target()
    assert classify_target(golden, Fraction(num, den)).kind == "nonperiodic"


def test_classify_float_target_is_stable_under_tol(golden):
    a = classify_target(golden, 1 / 3, tol=1e-9)
    b = classify_target(golden, 1 / 3, tol=1e-10)
    assert a.label() == b.label() == "periodic(2)"


def test_classify_rejects_boundary_points(golden):
    with pytest.raises(AmbiguousPointError):
        classify_target(golden, 0.5)


def test_orbit_leaving_through_hole_is_off_survivor(golden):
    spec = classify_target(golden, Fraction(9, 10))
    assert spec.kind == "off_survivor"
    assert spec.exit_step == oracles.binary_exit_time(9, 10)


def test_singular_set_distance():
    t = doubling_map()
    # preimages of 1/2 of order 0..2 are the points k/8
    assert singular_set_distance(t, 1 / 3, 2) == pytest.approx(1 / 24)
    assert singular_set_distance(t, 0.5, 0) == 0.0
    assert singular_set_distance(t, 1 / 3, 10) > 0


def test_markov_closure_of_hole_endpoint():
    pts = markov_closure(doubling_map(), [Fraction(1, 4)])
    # T(1/4) = 1/2 and T(1/2) = 0: the closure adds nothing new
    assert pts == [Fraction(0), Fraction(1, 4), Fraction(1, 2), Fraction(1)]


def test_open_system_requires_hole_unless_closed_control():
    with pytest.raises(ValueError):
        OpenSystem(doubling_map(), IntervalSet.empty())
    assert OpenSystem(doubling_map(), IntervalSet.empty(), allow_closed=True).closed
