"""Trajectory-level Monte Carlo for open systems.

Particles are processed in fixed-size chunks, each with its own generator
derived from ``(seed, chunk index)``.  Chunk results are integer counts or
arrays concatenated in chunk order, so every output is independent of the
number of worker threads.

Floating-point iteration of an expanding map loses one bit of the state per
doubling.  To keep long trajectories meaningful every step adds an
independent uniform perturbation of size ``jitter`` (default 2**-50), which
replaces the lost low-order bits with fresh random ones.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .errors import EmptyDensityError, InfeasibleHorizonError, InsufficientSurvivorsError
from .interval_maps import IntervalSet, OpenSystem, preimage_set, survivor_approx
from .ulam import BinPartition, SpectralSolution, escape_rate  # noqa: F401  (re-export)

CHUNK = 1 << 16
JITTER = 2.0 ** -50
MIN_COUNT = 100


def chunk_rng(seed: int, chunk: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(chunk),)))


def default_workers() -> int:
    env = os.environ.get("OPENEVT_WORKERS")
    return max(1, int(env)) if env else 1


def _map_chunks(fn: Callable[[int, int], object], n_particles: int, workers: int | None) -> list:
    sizes = [CHUNK] * (n_particles // CHUNK)
    if n_particles % CHUNK:
        sizes.append(n_particles % CHUNK)
    workers = workers or default_workers()
    if workers == 1 or len(sizes) == 1:
        return [fn(i, s) for i, s in enumerate(sizes)]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, range(len(sizes)), sizes))


# ---------------------------------------------------------------------------
# sampling


def sample_from_density(weights: np.ndarray, partition: BinPartition, rng: np.random.Generator,
                        size: int | None = None):
    """Draw from a piecewise-constant density (bin by mass, uniform inside)."""
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    mass = weights * partition.widths
    total = mass.sum()
    if not total > 0:
        raise EmptyDensityError("density has zero total mass", parameter="weights")
    cdf = np.cumsum(mass) / total
    n = 1 if size is None else size
    bins = np.searchsorted(cdf, rng.random(n), side="right")
    bins = np.minimum(bins, partition.k - 1)
    lo = partition.breakpoints[bins]
    x = lo + rng.random(n) * partition.widths[bins]
    x = np.minimum(x, np.nextafter(partition.breakpoints[bins + 1], 0.0))
    return float(x[0]) if size is None else x


def _nu_weights(sys: OpenSystem, sol: SpectralSolution) -> np.ndarray:
    """Per-bin density of ν = 1_{X0} h0 m."""
    frac = sol.partition.overlap_fraction(sys.x0)
    return sol.h0 * frac


def _sample_nu(sys: OpenSystem, sol: SpectralSolution, rng, size: int) -> np.ndarray:
    """Sample ν; bins straddling a hole endpoint are resampled until outside H."""
    x = sample_from_density(_nu_weights(sys, sol), sol.partition, rng, size)
    bad = sys.hole_mask(x)
    while bad.any():
        x[bad] = sample_from_density(_nu_weights(sys, sol), sol.partition, rng, int(bad.sum()))
        bad = sys.hole_mask(x)
    return x


def _step(sys: OpenSystem, x: np.ndarray, rng, jitter: float) -> np.ndarray:
    y = sys.map.apply(x)
    if jitter:
        y = y + jitter * rng.random(len(y))
        y = np.minimum(y, np.nextafter(1.0, 0.0))
    return y


# ---------------------------------------------------------------------------
# single trajectories


@dataclass(frozen=True)
class Trajectory:
    positions: tuple
    exit_time: int | None

    @property
    def survived(self) -> bool:
        return self.exit_time is None


def survival_simulate(sys: OpenSystem, x0, horizon: int) -> Trajectory:
    """Iterate from x0 until the first entry into H or the horizon.

    Rational inputs (``Fraction``) on affine maps are iterated exactly.
    ``positions`` holds x_0, ..., x_t where t is the exit time (the last
    entry then lies in H) or the horizon.
    """
    if sys.in_hole(float(x0)):
        raise ValueError("x0 must lie in X0")
    x = x0
    pos = [x]
    for t in range(1, horizon + 1):
        x = sys.map(x)
        pos.append(x)
        if sys.in_hole(float(x)):
            return Trajectory(tuple(pos), t)
    return Trajectory(tuple(pos), None)


# ---------------------------------------------------------------------------
# survival ensembles


@dataclass(frozen=True, eq=False)
class SurvivalEnsemble:
    """``survivors[t]`` counts particles with x_0, ..., x_t all in X0.

    ``exit_times`` is -1 for particles alive at the horizon.
    """

    seed: int
    n_particles: int
    horizon: int
    survivors: np.ndarray
    exit_times: np.ndarray

    def exit_histogram(self) -> tuple[np.ndarray, np.ndarray]:
        t = np.arange(1, self.horizon + 1)
        counts = np.bincount(self.exit_times[self.exit_times > 0], minlength=self.horizon + 1)[1:]
        return t, counts


def survival_ensemble(sys: OpenSystem, sol: SpectralSolution, n_particles: int, horizon: int,
                      seed: int, workers: int | None = None, jitter: float = JITTER) -> SurvivalEnsemble:
    def run(chunk, size):
        rng = chunk_rng(seed, chunk)
        x = _sample_nu(sys, sol, rng, size)
        idx = np.arange(size)
        exits = np.full(size, -1, dtype=np.int32)
        counts = np.zeros(horizon + 1, dtype=np.int64)
        counts[0] = size
        for t in range(1, horizon + 1):
            x = _step(sys, x, rng, jitter)
            out = sys.hole_mask(x)
            exits[idx[out]] = t
            x, idx = x[~out], idx[~out]
            counts[t] = len(x)
            if not len(x):
                break
        return counts, exits

    res = _map_chunks(run, n_particles, workers)
    counts = np.sum([r[0] for r in res], axis=0)
    exits = np.concatenate([r[1] for r in res])
    return SurvivalEnsemble(seed, n_particles, horizon, counts, exits)


@dataclass(frozen=True)
class AlphaFit:
    alpha_hat: float
    stderr: float
    times: np.ndarray
    log_fraction: np.ndarray


def fit_alpha(ens: SurvivalEnsemble, min_count: int = MIN_COUNT) -> AlphaFit:
    """Least-squares slope of log survivor fraction against time.

    The standard error accounts for the correlation of survivor counts of
    one ensemble: for geometric survival, Cov(log S_s, log S_t) =
    (α^{-min(s,t)} - 1)/N.
    """
    t = np.flatnonzero(ens.survivors >= min_count)
    t = t[t == np.arange(len(t))]
    if len(t) < 3:
        raise InsufficientSurvivorsError(
            f"only {len(t)} time points keep at least {min_count} survivors", parameter="n_particles")
    y = np.log(ens.survivors[t] / ens.n_particles)
    tc = t - t.mean()
    c = tc / np.sum(tc * tc)
    slope = float(np.sum(c * y))
    a = math.exp(slope)
    m = np.minimum.outer(t, t)
    cov = (np.power(a, -m.astype(float)) - 1.0) / ens.n_particles
    var = float(c @ cov @ c)
    return AlphaFit(a, a * math.sqrt(max(var, 0.0)), t, y)


def estimate_alpha_mc(sys: OpenSystem, sol: SpectralSolution, n_particles: int, horizon: int,
                      seed: int, workers: int | None = None) -> tuple[float, float]:
    """(alpha_hat, stderr) from the decay of the survivor fraction under ν."""
    if n_particles < 1000:
        raise ValueError("n_particles must be at least 1000")
    fit = fit_alpha(survival_ensemble(sys, sol, n_particles, horizon, seed, workers))
    return fit.alpha_hat, fit.stderr


def geometric_gof(ens: SurvivalEnsemble, alpha: float, min_expected: float = 5.0):
    """χ² test of exit times against P(exit = t) = α^{t-1}(1 - α).

    Cells with small expected counts are pooled into the tail.  Returns
    ``(statistic, dof, p_value)``.
    """
    n = ens.n_particles
    _, counts = ens.exit_histogram()
    exp_p = alpha ** np.arange(ens.horizon) * (1 - alpha)
    obs, expd = [], []
    for t in range(ens.horizon):
        e = n * exp_p[t]
        if e < min_expected:
            break
        obs.append(counts[t])
        expd.append(e)
    tail_obs = n - sum(obs)
    tail_exp = n - sum(expd)
    obs.append(tail_obs)
    expd.append(tail_exp)
    obs, expd = np.array(obs, float), np.array(expd, float)
    stat = float(np.sum((obs - expd) ** 2 / expd))
    dof = len(obs) - 1
    return stat, dof, float(stats.chi2.sf(stat, dof))


# ---------------------------------------------------------------------------
# conditioned trajectories and minima


@dataclass(frozen=True, eq=False)
class ConditionedCounts:
    """For each horizon n: survivors of n - 1 steps and, per radius, how many
    of them kept min_{i<n} |x_i - z| >= radius."""

    n_values: tuple
    radii: tuple
    survivors: np.ndarray
    below: tuple


def conditioned_counts(sys: OpenSystem, sol: SpectralSolution, z: float,
                       n_values: Sequence[int], radii: Sequence[Sequence[float]],
                       n_particles: int, seed: int, workers: int | None = None,
                       jitter: float = JITTER) -> ConditionedCounts:
    """Counts behind P̂_n(M_n <= u_n) for every (n, radius) pair.

    M_n = max_{0<=i<n} -log|T^i x - z| <= u  iff  min_{i<n} |T^i x - z| >= e^{-u},
    over particles with x_0, ..., x_{n-1} in X0.
    """
    n_values = tuple(int(n) for n in n_values)
    radii = tuple(tuple(float(r) for r in rs) for rs in radii)
    if len(radii) != len(n_values):
        raise ValueError("one radius list per n")
    nmax = max(n_values)
    z = float(z)

    def run(chunk, size):
        rng = chunk_rng(seed, chunk)
        x = _sample_nu(sys, sol, rng, size)
        mind = np.abs(x - z)
        surv = np.zeros(len(n_values), dtype=np.int64)
        below = [np.zeros(len(rs), dtype=np.int64) for rs in radii]
        for t in range(nmax):
            # x holds x_t for particles whose x_0..x_{t-1} avoid H
            keep = ~sys.hole_mask(x)
            x, mind = x[keep], mind[keep]
            np.minimum(mind, np.abs(x - z), out=mind)
            for j, n in enumerate(n_values):
                if n == t + 1:
                    surv[j] = len(x)
                    below[j][:] = [(mind >= r).sum() for r in radii[j]]
            if t + 1 < nmax:
                x = _step(sys, x, rng, jitter)
        return surv, below

    res = _map_chunks(run, n_particles, workers)
    surv = np.sum([r[0] for r in res], axis=0)
    below = tuple(np.sum([r[1][j] for r in res], axis=0) for j in range(len(n_values)))
    return ConditionedCounts(n_values, radii, surv, below)


def conditioned_minima(sys: OpenSystem, sol: SpectralSolution, z: float, n: int,
                       n_particles: int, seed: int, workers: int | None = None,
                       jitter: float = JITTER) -> np.ndarray:
    """min_{i<n} |T^i x - z| for every particle that survives n - 1 steps."""
    z = float(z)

    def run(chunk, size):
        rng = chunk_rng(seed, chunk)
        x = _sample_nu(sys, sol, rng, size)
        mind = np.abs(x - z)
        for t in range(n):
            keep = ~sys.hole_mask(x)
            x, mind = x[keep], mind[keep]
            np.minimum(mind, np.abs(x - z), out=mind)
            if t + 1 < n:
                x = _step(sys, x, rng, jitter)
        return mind

    return np.concatenate(_map_chunks(run, n_particles, workers))


def _backward_step(sys: OpenSystem, sol: SpectralSolution, x: np.ndarray, rng) -> np.ndarray:
    """Draw a preimage y of x in X0 with probability h0(y) / (|T'(y)| α h0(x))."""
    part = sol.partition
    ys, ws = [], []
    for b in sys.map.branches:
        s, o = float(b.slope), float(b.offset)
        y = (x - o) / s
        ok = (y >= float(b.lo)) & (y < float(b.hi))
        y = np.clip(y, float(b.lo), np.nextafter(float(b.hi), 0.0))
        ok &= ~sys.hole_mask(y)
        ys.append(y)
        ws.append(np.where(ok, sol.h0[part.locate(y)] / abs(s), 0.0))
    ys, ws = np.array(ys), np.array(ws)
    cum = np.cumsum(ws, axis=0)
    total = cum[-1]
    pick = (rng.random(len(x)) * total)[None, :] >= cum
    j = np.minimum(pick.sum(axis=0), len(ys) - 1)
    dead = total <= 0
    if dead.any():
        # round-off left no admissible preimage; take any preimage inside the domain
        j[dead] = np.argmax(ws[:, dead] >= 0, axis=0)
    return ys[j, np.arange(len(x))]


def backward_minima(sys: OpenSystem, sol: SpectralSolution, z: float, n: int, n_paths: int,
                    seed: int, workers: int | None = None) -> np.ndarray:
    """min_{i<n} |x_i - z| over paths drawn from ν conditioned on X_{n-1}.

    Paths are generated backwards: x_{n-1} ~ ν, then each earlier point is a
    preimage in X0 chosen with weight h0(y)/|T'(y)|.  Because
    L0 h0 = α h0 these weights sum to one and the path has exactly the
    conditioned law, with no rejection.  Needs affine branches.
    """
    if not sys.map.affine:
        raise ValueError("backward sampling needs affine branches")
    z = float(z)

    def run(chunk, size):
        rng = chunk_rng(seed, chunk)
        x = _sample_nu(sys, sol, rng, size)
        mind = np.abs(x - z)
        for _ in range(n - 1):
            x = _backward_step(sys, sol, x, rng)
            np.minimum(mind, np.abs(x - z), out=mind)
        return mind

    return np.concatenate(_map_chunks(run, n_paths, workers))


def backward_paths(sys: OpenSystem, sol: SpectralSolution, n: int, n_paths: int,
                   seed: int) -> np.ndarray:
    """Conditioned paths (rows x_0, ..., x_{n-1}) by backward sampling; small sizes only."""
    rng = chunk_rng(seed, 0)
    out = np.empty((n_paths, n))
    x = _sample_nu(sys, sol, rng, n_paths)
    out[:, n - 1] = x
    for t in range(n - 2, -1, -1):
        x = _backward_step(sys, sol, x, rng)
        out[:, t] = x
    return out


def check_feasible(n_particles: int, alpha: float, n: int, min_count: int = MIN_COUNT):
    """Raise if fewer than ``min_count`` particles are expected to survive n - 1 steps."""
    expected = n_particles * alpha ** (n - 1)
    if expected < min_count:
        raise InfeasibleHorizonError(
            f"n={n} expects {expected:.3g} survivors of {n_particles} particles (< {min_count})",
            parameter="n_values", expected=expected)
    return expected


# ---------------------------------------------------------------------------
# conditional invariance


def check_conditional_invariance(sys: OpenSystem, sol: SpectralSolution,
                                 test_sets: Sequence[IntervalSet], n: int) -> float:
    """max over A of |ν(T^{-n}A ∩ X_n) - ν(A)ν(X_n)| / (ν(A)ν(X_n))."""
    if n > 20:
        raise ValueError("n must be at most 20")
    xn = survivor_approx(sys, n)
    nu_xn = sol.nu_measure(xn)
    worst = 0.0
    for a in test_sets:
        pre = a
        for _ in range(n):
            pre = preimage_set(sys.map, pre)
        lhs = sol.nu_measure(pre & xn)
        rhs = sol.nu_measure(a) * nu_xn
        if lhs == 0.0 and rhs == 0.0:
            continue
        worst = max(worst, abs(lhs - rhs) / max(abs(rhs), 1e-300))
    return worst


__all__ = [
    "CHUNK", "JITTER", "AlphaFit", "backward_minima", "backward_paths", "ConditionedCounts", "SurvivalEnsemble", "Trajectory",
    "check_conditional_invariance", "check_feasible", "chunk_rng", "conditioned_counts",
    "conditioned_minima", "estimate_alpha_mc", "escape_rate", "fit_alpha", "geometric_gof",
    "sample_from_density", "survival_ensemble", "survival_simulate",
]
