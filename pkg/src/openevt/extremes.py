"""Extreme value statistics for a target point of an open system.

The observable is φ(x) = -log|x - z|, so M_n <= u means the orbit segment
avoids the open ball B(z, e^{-u}).  Boundary levels, empirical and operator
EVD curves, the three extremal-index estimators and the degenerate-limit
probe for targets off the survivor set all live here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import (BallTooLargeError, ClassificationMismatchError, FormulaDomainError,
                     OffSupportError)
from .interval_maps import (IntervalSet, OpenSystem, TargetSpec, as_fraction, preimage_set,
                            survivor_approx)
from .open_dynamics import ConditionedCounts, check_feasible, conditioned_counts
from .ulam import (BinPartition, PerturbedSpectrum, SpectralSolution, _ball_points, ball_set,
                   build_operator, evd_operator_curve, perturbed_eigenvalue_curve,
                   refine_partition)


def observable_phi(x, z):
    """φ(x) = -log|x - z|, with +inf at x = z."""
    if isinstance(x, np.ndarray):
        d = np.abs(x - float(z))
        with np.errstate(divide="ignore"):
            return -np.log(d)
    d = abs(float(x) - float(z))
    return math.inf if d == 0.0 else -math.log(d)


def _exact_target(z):
    if isinstance(z, (Fraction, str)):
        return as_fraction(z)
    return float(z)


# ---------------------------------------------------------------------------
# boundary levels


@dataclass(frozen=True)
class BoundaryLevels:
    tau: float
    n_values: tuple
    u_values: np.ndarray
    radii: np.ndarray
    masses: np.ndarray


def ball_mass(sol: SpectralSolution, z, r: float) -> float:
    """Λ(B(z, r))."""
    return sol.lambda_ball(_exact_target(z), r)


def level_radius(sol: SpectralSolution, z, target: float, rtol: float = 1e-7) -> float:
    """Radius r with Λ(B(z, r)) = target, by bisection in log r."""
    zf = float(z)
    r_hi = max(zf, 1.0 - zf) + 1e-12
    if not 0 < target <= 1:
        raise ValueError("target mass must lie in (0, 1]")
    if ball_mass(sol, z, r_hi) < target * (1 - 1e-12):
        raise OffSupportError("Λ has too little mass near z for this level", parameter="z")
    r_lo = r_hi
    while r_lo > 1e-280:
        r_lo *= 2.0 ** -8
        if ball_mass(sol, z, r_lo) < target:
            break
    else:
        raise OffSupportError("Λ puts an atom at z", parameter="z")
    if ball_mass(sol, z, r_hi * 0.999999) == 0.0:
        raise OffSupportError("Λ gives no mass to neighbourhoods of z", parameter="z")
    lo, hi = math.log(r_lo), math.log(r_hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        m = ball_mass(sol, z, math.exp(mid))
        if abs(m - target) <= rtol * target:
            return math.exp(mid)
        if m < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    return math.exp(0.5 * (lo + hi))


def boundary_levels(sol: SpectralSolution, partition: BinPartition, z, tau: float,
                    n_values: Sequence[int]) -> BoundaryLevels:
    """u_n = -log r_n with n Λ(B(z, r_n)) = τ."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    n_values = tuple(int(n) for n in n_values)
    if any(b <= a for a, b in zip(n_values, n_values[1:])):
        raise ValueError("n_values must increase")
    radii, masses = [], []
    for n in n_values:
        r = level_radius(sol, z, tau / n)
        radii.append(r)
        masses.append(ball_mass(sol, z, r))
    radii = np.array(radii)
    return BoundaryLevels(float(tau), n_values, -np.log(radii), radii, np.array(masses))


# ---------------------------------------------------------------------------
# EVD curves


@dataclass(frozen=True)
class McCurve:
    n_values: tuple
    radii: np.ndarray
    survivors: np.ndarray
    p: np.ndarray
    stderr: np.ndarray


def _binomial(k, n):
    p = np.where(n > 0, k / np.maximum(n, 1), np.nan)
    se = np.sqrt(p * (1 - p) / np.maximum(n, 1))
    return p, se


def empirical_evd(sys: OpenSystem, sol: SpectralSolution, z, levels: BoundaryLevels,
                  n_particles: int, seed: int, workers: int | None = None) -> McCurve:
    """P̂_n(M_n <= u_n) among particles surviving n - 1 steps, with binomial errors."""
    for n in levels.n_values:
        check_feasible(n_particles, sol.alpha, n)
    cc = conditioned_counts(sys, sol, float(z), levels.n_values, [[r] for r in levels.radii],
                            n_particles, seed, workers)
    below = np.array([b[0] for b in cc.below])
    p, se = _binomial(below, cc.survivors)
    return McCurve(levels.n_values, np.asarray(levels.radii), cc.survivors, p, se)


def operator_evd(sys: OpenSystem, sol: SpectralSolution, partition: BinPartition, z,
                 levels: BoundaryLevels) -> np.ndarray:
    return evd_operator_curve(sys, sol, partition, float(z), levels.u_values, levels.n_values)


# ---------------------------------------------------------------------------
# extremal index


def theta_formula(spec: TargetSpec, alpha: float, deriv_p: float | None = None) -> float:
    """θ = 1 - 1/(α^p |(T^p)'(z)|) at a periodic target, 1 at a nonperiodic one.

    Returns NaN for targets off the survivor set (degenerate law).
    """
    if spec.kind == "nonperiodic":
        return 1.0
    if spec.kind == "off_survivor":
        return math.nan
    if deriv_p is None:
        raise ValueError("periodic targets need |(T^p)'(z)|")
    x = alpha ** spec.period * deriv_p
    if not x > 1:
        raise FormulaDomainError(
            f"alpha^p |(T^p)'(z)| = {x:.6g} <= 1; the hole is too large for this target",
            parameter="alpha")
    return 1.0 - 1.0 / x


def theta_from_escape_rate(spec: TargetSpec, eta: float, deriv_p: float | None = None) -> float:
    """Same index written with η = -log α: 1 - e^{pη}/|(T^p)'(z)|."""
    if spec.kind != "periodic":
        return theta_formula(spec, math.exp(-eta), deriv_p)
    x = deriv_p * math.exp(-spec.period * eta)
    if not x > 1:
        raise FormulaDomainError("hole too large for this target", parameter="eta")
    return 1.0 - math.exp(spec.period * eta) / deriv_p


def theta_spectral(spec: PerturbedSpectrum) -> tuple[float, float]:
    """Slope (α - λ_n)/Δ_n extrapolated linearly to Δ_n = 0."""
    return spec.extrapolate()


@dataclass(frozen=True)
class GumbelFit:
    theta: float
    stderr: float
    intercept: float
    intercept_stderr: float
    n: int
    tau: np.ndarray
    neg_log_p: np.ndarray
    p: np.ndarray
    survivors: int


def fit_gumbel_counts(tau: Sequence[float], below: np.ndarray, survivors: int, n: int) -> GumbelFit:
    """Regress -log P̂(M_n <= u_n(τ)) on τ.

    All τ share one conditioned ensemble, so the events are nested; the
    covariance of the log frequencies is (1/max(p_a, p_b) - 1)/N.
    """
    tau = np.asarray(tau, dtype=float)
    p = np.asarray(below, dtype=float) / survivors
    if np.any(p <= 0):
        raise OffSupportError("a level was exceeded by every survivor", parameter="tau")
    y = -np.log(p)
    x = np.column_stack([np.ones_like(tau), tau])
    pinv = np.linalg.pinv(x)
    coef = pinv @ y
    cov_y = (1.0 / np.maximum.outer(p, p) - 1.0) / survivors
    cov = pinv @ cov_y @ pinv.T
    return GumbelFit(theta=float(coef[1]), stderr=float(math.sqrt(max(cov[1, 1], 0.0))),
                     intercept=float(coef[0]), intercept_stderr=float(math.sqrt(max(cov[0, 0], 0.0))),
                     n=n, tau=tau, neg_log_p=y, p=p, survivors=int(survivors))


def theta_gumbel(sys: OpenSystem, sol: SpectralSolution, z, n: int, tau_grid: Sequence[float],
                 n_particles: int, seed: int, workers: int | None = None) -> GumbelFit:
    """Fit of -log P̂_n(M_n <= u_n(τ)) against τ at a fixed n; slope estimates θ."""
    check_feasible(n_particles, sol.alpha, n)
    radii = [level_radius(sol, z, t / n) for t in tau_grid]
    cc = conditioned_counts(sys, sol, float(z), [n], [radii], n_particles, seed, workers)
    return fit_gumbel_counts(tau_grid, cc.below[0], int(cc.survivors[0]), n)


# ---------------------------------------------------------------------------
# return ratios


@dataclass(frozen=True)
class ReturnRatios:
    k_max: int
    radii: np.ndarray
    r_kn: np.ndarray
    q_kn: np.ndarray
    r_k: np.ndarray
    stable: bool
    theta_ret: float
    alpha: float

    @property
    def identity_residual(self) -> float:
        """max |q_{k,n} - α^{k+1} r_{k,n}|."""
        k = np.arange(self.k_max + 1)[:, None]
        return float(np.max(np.abs(self.q_kn - self.alpha ** (k + 1) * self.r_kn)))


def return_sets(sys: OpenSystem, ball: IntervalSet, k_max: int) -> list[IntervalSet]:
    """B ∩ T^{-1}B^c ∩ ... ∩ T^{-k}B^c ∩ T^{-(k+1)}B for k = 0..k_max.

    Points passing through the hole carry no Λ-mass, so intermediate sets
    are also restricted to X0.
    """
    outside = ball.complement() & sys.x0
    f = ball & sys.x0
    out = []
    for _ in range(k_max + 1):
        out.append(ball & preimage_set(sys.map, f))
        f = outside & preimage_set(sys.map, f)
    return out


def _q_operator(sys, sol, partition, z, r, k_max):
    """q_{k,n} = ∫(L0 - L̃)L̃^k(L0 - L̃)h0 dμ0 / Δ_n on a ball-aligned partition."""
    ball = ball_set(z, r)
    ref = refine_partition(sys, partition, _ball_points(z, r)) if sol.exact else None
    part = ref or partition
    h, mu = sol.on_partition(part)
    op_open = sol.operator if part is sol.partition else build_operator(sys, part, "open")
    op_b = build_operator(sys, part, "target_perturbed", ball)
    diff = (op_open.matrix - op_b.matrix).T.tocsr()
    mt = op_b.transpose
    dens_mu = mu / part.widths
    p = diff @ h
    delta = float(p @ dens_mu)
    q = []
    for _ in range(k_max + 1):
        q.append(float((diff @ p) @ dens_mu) / delta if delta > 0 else math.nan)
        p = mt @ p
    return np.array(q), delta


def return_ratios(sys: OpenSystem, sol: SpectralSolution, partition: BinPartition, z,
                  p_hint: int | None = None, k_max: int = 8,
                  radii: Sequence[float] = ()) -> ReturnRatios:
    """r_{k,n} by interval algebra and q_{k,n} from the perturbed operator.

    r_k is taken at the smallest radius; ``stable`` records whether the two
    smallest radii agree to 1e-3 for every k.
    """
    radii = np.sort(np.asarray(radii, dtype=float))[::-1]
    if len(radii) == 0:
        raise ValueError("need at least one radius")
    zf = float(z)
    for r in radii:
        for c in sys.map.boundaries:
            if abs(c - zf) < r:
                raise BallTooLargeError(
                    f"ball of radius {r!r} contains the branch boundary {c!r}", parameter="radii")
    r_kn = np.zeros((k_max + 1, len(radii)))
    q_kn = np.zeros_like(r_kn)
    for j, r in enumerate(radii):
        ball = ball_set(zf, r)
        lb = sol.lambda_measure(ball)
        if lb <= 0:
            raise OffSupportError(f"Λ(B(z, {r!r})) = 0", parameter="z")
        for k, s in enumerate(return_sets(sys, ball, k_max)):
            r_kn[k, j] = sol.lambda_measure(s) / lb
        q_kn[:, j], _ = _q_operator(sys, sol, partition, z, r, k_max)
    r_k = r_kn[:, -1]
    stable = len(radii) < 2 or bool(np.all(np.abs(r_kn[:, -1] - r_kn[:, -2]) <= 1e-3))
    return ReturnRatios(k_max, radii, r_kn, q_kn, r_k, stable,
                        float(1.0 - r_k.sum()), sol.alpha)


# ---------------------------------------------------------------------------
# estimates bundle


@dataclass(frozen=True)
class ThetaEstimates:
    classification: str
    theta_formula: float
    theta_spectral: float
    theta_return: float
    theta_gumbel: float
    errors: dict = field(default_factory=dict)

    def rows(self):
        for method in ("formula", "spectral", "return", "gumbel"):
            yield method, getattr(self, f"theta_{method}"), self.errors.get(method, math.nan)


@dataclass(frozen=True)
class EvdRun:
    levels: BoundaryLevels
    mc_curve: McCurve | None
    op_curve: np.ndarray
    theta: ThetaEstimates | None = None
    degenerate: bool = False
    n_hat: int | None = None


# ---------------------------------------------------------------------------
# degenerate branch


@dataclass(frozen=True)
class DegenerateProbe:
    n_hat: int
    depth: int
    n_values: tuple
    curve: np.ndarray
    lambda_n: np.ndarray
    alpha: float

    @property
    def exact_from(self) -> np.ndarray:
        """Mask of n for which λ_n equals α bit for bit."""
        return self.lambda_n == self.alpha


def _meets(lo: np.ndarray, hi: np.ndarray, z: float, r: float) -> bool:
    return bool(np.any((lo < z + r) & (hi > z - r)))


def first_disjoint_n(sys: OpenSystem, z: float, depth: int, n_max: int = 10 ** 9) -> int:
    """Smallest n with B(z, 1/n) ∩ X_depth = ∅ (u_n = log n)."""
    xs = survivor_approx(sys, depth)
    if not xs:
        return 1
    lo = np.array([a for a, _ in xs])
    hi = np.array([b for _, b in xs])
    z = float(z)
    if not _meets(lo, hi, z, 1.0):
        return 1
    if _meets(lo, hi, z, 1.0 / n_max):
        raise ClassificationMismatchError("z is not separated from the survivor set",
                                          parameter="z")
    a, b = 1, n_max
    while b - a > 1:
        m = (a + b) // 2
        if _meets(lo, hi, z, 1.0 / m):
            a = m
        else:
            b = m
    return b


def degenerate_probe(sys: OpenSystem, sol: SpectralSolution, partition: BinPartition, z,
                     n_values: Sequence[int], spec: TargetSpec | None = None,
                     depth: int = 20) -> DegenerateProbe:
    """EVD curve with u_n = log n for a target off the survivor set."""
    if spec is not None and spec.on_survivor:
        raise ClassificationMismatchError(
            f"target classified {spec.label()}; the degenerate probe needs an off-survivor point",
            parameter="z")
    zf = float(z)
    n_hat = first_disjoint_n(sys, zf, depth)
    n_values = tuple(int(n) for n in n_values)
    u = [math.log(n) for n in n_values]
    curve = evd_operator_curve(sys, sol, partition, zf, u, n_values)
    radii = [1.0 / n for n in n_values]
    order = np.argsort(radii)[::-1]
    ps = perturbed_eigenvalue_curve(sys, sol, partition, zf, [radii[i] for i in order])
    lam = np.empty(len(n_values))
    lam[order] = ps.lambda_n
    return DegenerateProbe(n_hat, depth, n_values, curve, lam, sol.alpha)


@dataclass(frozen=True)
class DistanceEstimate:
    estimate: float
    exact: float
    n_hat: int
    depth: int


def distance_estimate(sys: OpenSystem, sol: SpectralSolution, partition: BinPartition, z,
                      spec: TargetSpec | None = None, depth: int = 20) -> DistanceEstimate:
    """1/n̂ next to the exact distance from z to X_depth."""
    if spec is not None and spec.on_survivor:
        raise ClassificationMismatchError(
            f"target classified {spec.label()}; distance estimate needs an off-survivor point",
            parameter="z")
    n_hat = first_disjoint_n(sys, float(z), depth)
    exact = survivor_approx(sys, depth).distance(float(z))
    return DistanceEstimate(1.0 / n_hat, exact, n_hat, depth)


def h0_oscillation(sol: SpectralSolution, z, width: int = 2) -> float:
    """Relative spread of h0 over the bins around z (continuity diagnostic)."""
    i = int(sol.partition.locate(float(z)))
    lo, hi = max(0, i - width), min(sol.partition.k, i + width + 1)
    vals = sol.h0[lo:hi][sol.lambda_weights[lo:hi] > 0]
    if len(vals) == 0:
        return math.nan
    return float((vals.max() - vals.min()) / max(vals.max(), 1e-300))


__all__ = [
    "BoundaryLevels", "ConditionedCounts", "DegenerateProbe", "DistanceEstimate", "EvdRun",
    "GumbelFit", "McCurve", "ReturnRatios", "ThetaEstimates", "ball_mass", "boundary_levels",
    "degenerate_probe", "distance_estimate", "empirical_evd", "first_disjoint_n",
    "fit_gumbel_counts", "h0_oscillation", "level_radius", "observable_phi", "operator_evd",
    "return_ratios", "return_sets", "theta_formula", "theta_from_escape_rate", "theta_gumbel",
    "theta_spectral",
]
