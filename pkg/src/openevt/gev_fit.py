"""Block maxima, GEV fitting by L-moments, normalizing sequences and local dimension.

Shape convention: ξ > 0 is the Fréchet side (heavy upper tail), ξ = 0 is
Gumbel.  scipy's ``genextreme`` uses c = -ξ.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import optimize, special, stats

from .errors import DegenerateSampleError, InsufficientDataError, OffSupportError
from .extremes import _exact_target, observable_phi
from .ulam import BinPartition, SpectralSolution

EULER = 0.5772156649015329
GUMBEL_SHAPE_TOL = 0.1


def block_maxima(samples, z, block_len: int) -> np.ndarray:
    """max of φ over the first ``block_len`` points of each long enough trajectory."""
    if block_len < 16:
        raise ValueError("block_len must be at least 16")
    out = []
    for traj in samples:
        traj = np.asarray(traj, dtype=float)
        if len(traj) >= block_len:
            out.append(float(np.max(observable_phi(traj[:block_len], z))))
    if not out:
        raise InsufficientDataError(f"no trajectory reaches {block_len} steps", parameter="block_len")
    return np.array(out)


def maxima_from_minima(min_dist: np.ndarray) -> np.ndarray:
    """Block maxima of φ from per-trajectory minimal distances to z."""
    with np.errstate(divide="ignore"):
        return -np.log(np.asarray(min_dist, dtype=float))


@dataclass(frozen=True)
class GevFit:
    location: float
    scale: float
    shape: float
    n: int
    ks: float
    l_moments: tuple

    @property
    def gumbel_flag(self) -> bool:
        """True when the shape is far enough from 0 to leave the Gumbel domain."""
        return abs(self.shape) > GUMBEL_SHAPE_TOL

    def cdf(self, x):
        return stats.genextreme.cdf(x, -self.shape, loc=self.location, scale=self.scale)

    def sample(self, size: int, rng: np.random.Generator) -> np.ndarray:
        return stats.genextreme.rvs(-self.shape, loc=self.location, scale=self.scale,
                                    size=size, random_state=rng)


def sample_l_moments(x: np.ndarray) -> tuple[float, float, float]:
    """(l1, l2, t3) from unbiased probability-weighted moments."""
    x = np.sort(np.asarray(x, dtype=float))
    n = len(x)
    i = np.arange(n)
    b0 = x.mean()
    b1 = np.sum(i * x) / (n * (n - 1))
    b2 = np.sum(i * (i - 1) * x) / (n * (n - 1) * (n - 2))
    l1 = b0
    l2 = 2 * b1 - b0
    l3 = 6 * b2 - 6 * b1 + b0
    return float(l1), float(l2), float(l3 / l2)


def _t3_of_k(k: float) -> float:
    if abs(k) < 1e-8:
        return math.log(9 / 8) / math.log(2)
    return 2 * (1 - 3.0 ** -k) / (1 - 2.0 ** -k) - 3


def fit_gev(maxima: Sequence[float]) -> GevFit:
    """GEV parameters from sample L-moments.

    The shape solves the exact L-skewness relation; Hosking's rational
    approximation only supplies the bracket.
    """
    x = np.asarray(maxima, dtype=float)
    if len(x) < 200:
        raise InsufficientDataError(f"need at least 200 maxima, got {len(x)}", parameter="maxima")
    if np.any(np.isnan(x)):
        raise ValueError("maxima must not be NaN")
    if not np.all(np.isfinite(x)):
        raise DegenerateSampleError("infinite maxima: trajectories hit the target exactly",
                                    parameter="maxima")
    if np.ptp(x) == 0:
        raise DegenerateSampleError("all maxima are equal", parameter="maxima")
    l1, l2, t3 = sample_l_moments(x)
    if not l2 > 0:
        raise DegenerateSampleError("nonpositive L-scale", parameter="maxima")
    c = 2 / (3 + t3) - math.log(2) / math.log(3)
    k0 = 7.8590 * c + 2.9554 * c * c
    f = lambda k: _t3_of_k(k) - t3  # noqa: E731
    lo, hi = k0 - 0.5, k0 + 0.5
    while f(lo) * f(hi) > 0 and hi - lo < 20:
        lo, hi = lo - 0.5, hi + 0.5
    k = optimize.brentq(f, max(lo, -0.99), hi, xtol=1e-14) if f(max(lo, -0.99)) * f(hi) < 0 else k0
    if abs(k) < 1e-8:
        scale = l2 / math.log(2)
        loc = l1 - EULER * scale
    else:
        g = special.gamma(1 + k)
        scale = l2 * k / ((1 - 2.0 ** -k) * g)
        loc = l1 - scale * (1 - g) / k
    shape = -k
    ks = float(stats.kstest(x, stats.genextreme(-shape, loc=loc, scale=scale).cdf).statistic)
    return GevFit(float(loc), float(scale), float(shape), len(x), ks, (l1, l2, t3))


@dataclass(frozen=True)
class NormalizingSequences:
    n_values: tuple
    a_n: np.ndarray
    b_n: np.ndarray

    @property
    def a_limit(self) -> float:
        """Mean of a_n over the largest-n half."""
        h = len(self.a_n) // 2
        return float(np.mean(self.a_n[h:]))

    def b_targets(self, t0: float) -> np.ndarray:
        """(log n)/t0 for comparison with b_n."""
        return np.log(np.array(self.n_values, dtype=float)) / t0


def normalizing_sequences(fits: Sequence[GevFit], n_values: Sequence[int]) -> NormalizingSequences:
    """a_n = 1/scale_n, b_n = location_n."""
    if len(fits) != len(n_values):
        raise ValueError("one fit per n")
    return NormalizingSequences(tuple(int(n) for n in n_values),
                                np.array([1.0 / f.scale for f in fits]),
                                np.array([f.location for f in fits]))


@dataclass(frozen=True)
class DimensionEstimate:
    u_values: np.ndarray
    masses: np.ndarray
    d_n_values: np.ndarray
    t0_hat: float
    fdd_bound: float
    atom_flag: bool

    @property
    def hd_lower_bound(self) -> float:
        return self.t0_hat


def dimension_from_masses(u_values: Sequence[float], masses: Sequence[float],
                          n_values: Sequence[int] | None = None) -> DimensionEstimate:
    """d_n = log Λ(B_n)/(-u_n); t0_hat = min over the largest-u half.

    ``fdd_bound`` is sup_n {u_n - (log n)/t0_hat} when ``n_values`` is
    given.  Estimates below 0.05 are flagged as atom-like.
    """
    u = np.asarray(u_values, dtype=float)
    m = np.asarray(masses, dtype=float)
    if np.any(np.diff(u) <= 0):
        raise ValueError("u_values must increase")
    if np.any(m <= 0):
        raise OffSupportError("a ball carries zero Λ-mass", parameter="z")
    d = np.log(m) / (-u)
    h = len(d) // 2
    t0 = float(np.min(d[h:]))
    bound = math.nan
    if n_values is not None and t0 > 0:
        bound = float(np.max(u - np.log(np.asarray(n_values, dtype=float)) / t0))
    return DimensionEstimate(u, m, d, t0, bound, t0 < 0.05)


def local_dimension(sol: SpectralSolution, partition: BinPartition, z,
                    u_values: Sequence[float], n_values: Sequence[int] | None = None) -> DimensionEstimate:
    """Local-dimension quotients of Λ at z along the levels u_values."""
    zq = _exact_target(z)
    masses = [sol.lambda_ball(zq, math.exp(-u)) for u in u_values]
    return dimension_from_masses(u_values, masses, n_values)


__all__ = [
    "DimensionEstimate", "GevFit", "NormalizingSequences", "block_maxima", "dimension_from_masses",
    "fit_gev", "local_dimension", "maxima_from_minima", "normalizing_sequences", "sample_l_moments",
]
