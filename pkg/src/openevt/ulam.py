"""Ulam discretization of the closed, open and target-perturbed operators.

Convention: ``M[i, j]`` is the fraction of bin ``i``'s mass that one step of
the map sends into bin ``j``, restricted to a retained region ``R``.  Mass
vectors evolve as ``p -> p M`` and per-bin functions as ``w -> M w``; the
first gives densities (``h0``), the second the conformal measure ``mu0``.

For affine maps on a Markov partition the finite matrix is the exact
restriction of the transfer operator to step functions, so eigendata are
exact up to round-off.  Sub-bin masses of the singular measures ``mu0`` and
``Lambda`` are then computed by pushing pieces forward with the conformal
relation instead of assuming uniform mass inside a bin.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (ConvergenceError, DiscretizationToleranceError,
                     InconsistentClassificationError, UnsupportedModeError)
from .interval_maps import (Interval, IntervalSet, OpenSystem, as_fraction,
                            markov_closure)

VARIANTS = ("closed", "open", "target_perturbed")


# ---------------------------------------------------------------------------
# partitions


@dataclass(frozen=True, eq=False)
class BinPartition:
    breakpoints: np.ndarray
    markov: bool = False
    exact_points: tuple[Fraction, ...] | None = field(default=None, repr=False)
    aligned_hole: bool = True
    aligned_branches: bool = True

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        if bp[0] != 0.0 or bp[-1] != 1.0 or np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must increase strictly from 0 to 1")
        object.__setattr__(self, "breakpoints", bp)

    @property
    def k(self) -> int:
        return len(self.breakpoints) - 1

    def __len__(self):
        return self.k

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.breakpoints)

    def locate(self, x):
        """Bin index of x (right-continuous; x = 1 lands in the last bin)."""
        i = np.searchsorted(self.breakpoints, x, side="right") - 1
        return np.clip(i, 0, self.k - 1)

    def overlap_fraction(self, s: IntervalSet) -> np.ndarray:
        """m(bin_i ∩ s) / m(bin_i) for every bin."""
        out = np.zeros(self.k)
        rows, lo, hi = _pieces(self.breakpoints, s)
        np.add.at(out, rows, hi - lo)
        return out / self.widths


def build_partition(sys: OpenSystem, k: int, markov_mode: bool = False,
                    extra_points: Iterable = ()) -> BinPartition:
    """About ``k`` bins containing every hole endpoint and branch boundary.

    In Markov mode the breakpoints (plus ``extra_points``) are closed under
    the forward map so that each bin's image is a union of bins.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    tmap = sys.map
    base = {Fraction(j, k) for j in range(k + 1)}
    for a, b in sys.hole:
        base.add(as_fraction(a))
        base.add(as_fraction(b))
    for b in tmap.branches:
        base.add(as_fraction(b.lo))
        base.add(as_fraction(b.hi))
    base.update(as_fraction(p) for p in extra_points)
    if markov_mode:
        if not tmap.affine:
            raise UnsupportedModeError("Markov mode needs affine branches", parameter="markov_mode")
        pts = markov_closure(tmap, base, max_points=max(1 << 16, 8 * len(base)))
        if pts is None:
            raise UnsupportedModeError(
                "no finite Markov refinement: breakpoint orbits do not close",
                parameter="markov_mode")
    else:
        pts = sorted(base)
    floats = np.array([float(p) for p in pts])
    keep = np.concatenate(([True], np.diff(floats) > 0))
    return BinPartition(floats[keep], markov=markov_mode,
                        exact_points=tuple(p for p, kp in zip(pts, keep) if kp))


def _pieces(bp: np.ndarray, s: IntervalSet):
    """Split an interval set along the partition: (bin, lo, hi) arrays."""
    rows, los, his = [], [], []
    for a, b in s:
        i0 = int(np.searchsorted(bp, a, side="right") - 1)
        i1 = int(np.searchsorted(bp, b, side="left") - 1)
        idx = np.arange(i0, i1 + 1)
        lo = np.maximum(bp[idx], a)
        hi = np.minimum(bp[idx + 1], b)
        m = hi > lo
        rows.append(idx[m])
        los.append(lo[m])
        his.append(hi[m])
    if not rows:
        return np.zeros(0, int), np.zeros(0), np.zeros(0)
    return np.concatenate(rows), np.concatenate(los), np.concatenate(his)


def refine_partition(sys: OpenSystem, partition: BinPartition, points: Iterable,
                     max_new: int = 20_000) -> BinPartition | None:
    """Add ``points`` and their forward orbits to a Markov partition.

    Only new points are iterated, since the existing set is already forward
    closed.  Returns None when the partition is not Markov-affine or the
    orbits do not close within ``max_new`` points.
    """
    if not (partition.markov and sys.map.affine and partition.exact_points is not None):
        return None
    pts = set(partition.exact_points)
    frontier = [p if isinstance(p, Fraction) else Fraction(float(p)) for p in points]
    added = 0
    branches = sys.map.branches
    while frontier:
        p = frontier.pop()
        if p in pts or not 0 <= p <= 1:
            continue
        pts.add(p)
        added += 1
        if added > max_new:
            return None
        for b in branches:
            if b.lo <= p <= b.hi:
                frontier.append(b.value(p))
    if not added:
        return partition
    ordered = sorted(pts)
    floats = np.array([float(p) for p in ordered])
    keep = np.concatenate(([True], np.diff(floats) > 0))
    return BinPartition(floats[keep], markov=True,
                        exact_points=tuple(p for p, kp in zip(ordered, keep) if kp))


def _ball_points(z, r: float) -> list:
    zq = z if isinstance(z, Fraction) else Fraction(float(z))
    rq = Fraction(float(r))
    return [p for p in (zq - rq, zq + rq) if 0 < p < 1]


# ---------------------------------------------------------------------------
# operators


@dataclass(frozen=True, eq=False)
class DiscretizedOperator:
    partition: BinPartition
    matrix: sp.csr_matrix
    variant: str
    retained: IntervalSet

    @property
    def transpose(self) -> sp.csr_matrix:
        t = self.__dict__.get("_t")
        if t is None:
            t = self.matrix.T.tocsr()
            object.__setattr__(self, "_t", t)
        return t

    def push(self, mass: np.ndarray) -> np.ndarray:
        """One step on a per-bin mass vector (p -> p M)."""
        return self.transpose @ mass

    def pull(self, f: np.ndarray) -> np.ndarray:
        """Dual step on a per-bin function (w -> M w)."""
        return self.matrix @ f

    @property
    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()


def _as_ball(ball) -> IntervalSet:
    if ball is None:
        return IntervalSet.empty()
    if isinstance(ball, IntervalSet):
        return ball
    if isinstance(ball, Interval):
        return IntervalSet.of((ball.lo, ball.hi))
    lo, hi = ball
    return IntervalSet.of((lo, hi))


def ball_set(z: float, r: float) -> IntervalSet:
    """Open ball B(z, r) intersected with [0, 1]."""
    z = float(z)
    return IntervalSet.of((z - r, z + r))


def build_operator(sys: OpenSystem, partition: BinPartition, variant: str = "open",
                   ball=None) -> DiscretizedOperator:
    """Ulam matrix of L, L0 or the target-perturbed operator.

    ``M[i, j] = m(bin_i ∩ R ∩ T^{-1} bin_j) / m(bin_i)``, exact for affine
    branches and computed through inverse branches otherwise.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    if variant == "closed":
        retained = IntervalSet.full()
    elif variant == "open":
        retained = sys.x0
    else:
        if ball is None:
            raise ValueError("target_perturbed needs a ball")
        retained = sys.x0 - _as_ball(ball)
    bp = partition.breakpoints
    w = partition.widths
    k = partition.k
    tmap = sys.map
    rows, plo, phi = _pieces(bp, retained)
    br = tmap.branch_indices(0.5 * (plo + phi)) if len(rows) else np.zeros(0, int)

    if tmap.affine:
        s = tmap._slopes[br]
        o = tmap._offsets[br]
        y0, y1 = s * plo + o, s * phi + o
        ya, yb = np.minimum(y0, y1), np.maximum(y0, y1)
        j0 = np.clip(np.searchsorted(bp, ya, side="right") - 1, 0, k - 1)
        j1 = np.clip(np.searchsorted(bp, yb, side="left") - 1, 0, k - 1)
        j1 = np.maximum(j1, j0)
        cnt = j1 - j0 + 1
        rep = np.repeat(np.arange(len(rows)), cnt)
        start = np.cumsum(cnt) - cnt
        j = j0[rep] + (np.arange(cnt.sum()) - start[rep])
        ov = np.minimum(yb[rep], bp[j + 1]) - np.maximum(ya[rep], bp[j])
        val = ov / (np.abs(s[rep]) * w[rows[rep]])
        keep = ov > 0
        mat = sp.coo_matrix((val[keep], (rows[rep][keep], j[keep])), shape=(k, k)).tocsr()
    else:
        ri, cj, vals = [], [], []
        for i, a, b, bi in zip(rows, plo, phi, br):
            branch = tmap.branches[bi]
            fa, fb = branch.value(float(a)), branch.value(float(b))
            ya, yb = min(fa, fb), max(fa, fb)
            inner = bp[(bp > ya) & (bp < yb)]
            cuts = [a, b] + [branch.inverse(y) for y in inner]
            cuts = np.sort(np.clip(cuts, a, b))
            for u, v in zip(cuts[:-1], cuts[1:]):
                if v <= u:
                    continue
                mid = branch.value(0.5 * (u + v))
                ri.append(i)
                cj.append(int(partition.locate(mid)))
                vals.append((v - u) / w[i])
        mat = sp.coo_matrix((vals, (ri, cj)), shape=(k, k)).tocsr()
        expected = partition.overlap_fraction(retained)
        got = np.asarray(mat.sum(axis=1)).ravel()
        err = np.max(np.abs(got - expected) / np.maximum(expected, 1e-300), initial=0.0)
        if err > 1e-8:
            raise DiscretizationToleranceError(
                f"row sums miss the retained fractions by {err:.3g}", parameter="partition")
    mat.sum_duplicates()
    return DiscretizedOperator(partition, mat, variant, retained)


# ---------------------------------------------------------------------------
# eigenproblems


def leading_eigs(op: DiscretizedOperator, tol: float = 1e-12, max_iter: int = 100_000,
                 start: np.ndarray | None = None, second: bool = True):
    """Power iteration for the leading eigenpair of a nonnegative operator.

    Returns ``(lambda1, right, left, lambda2_abs)`` where ``right`` is a mass
    vector (p M = lambda p) and ``left`` a per-bin function (M w = lambda w).
    ``lambda2_abs`` comes from deflated iteration and is only a rough
    magnitude.
    """
    mt, m = op.transpose, op.matrix
    if m.nnz == 0 or not np.any(m.data > 0):
        raise ConvergenceError("operator has no positive entry", parameter="op")
    w = op.partition.widths
    try:
        lam, p = _power(mt, w.copy() if start is None else np.asarray(start, float), tol, max_iter, "right")
        lam_l, v = _power(m, np.ones(op.partition.k), tol, max_iter, "left")
    except ConvergenceError as e:
        # no usable gap (e.g. a Jordan block at the top eigenvalue): Arnoldi
        lam, p = _arnoldi(mt, e)
        lam_l, v = _arnoldi(m.tocsr(), e)
        tol = max(tol, 1e-7)
    if abs(lam - lam_l) > 1e3 * tol * max(lam, 1e-300) + 1e-14:
        raise ConvergenceError("left and right iterations disagree", parameter="op",
                               residual=abs(lam - lam_l))
    lam2 = _second_magnitude(mt, p, v, lam) if second else float("nan")
    return lam, p, v, lam2


def _arnoldi(a, err: ConvergenceError):
    """Top eigenpair by ARPACK; accepted only if the residual is small."""
    try:
        w, vec = spla.eigs(a.astype(float), k=1, which="LM")
    except (spla.ArpackNoConvergence, ValueError, TypeError):
        raise err from None
    lam = float(w[0].real)
    x = np.abs(vec[:, 0].real)
    x /= x.sum()
    res = float(np.abs(a @ x - lam * x).sum())
    if abs(w[0].imag) > 1e-10 or not lam > 0 or res > 1e-8:
        raise err
    return lam, x


def _power(a, x, tol, max_iter, side):
    x = np.maximum(x, 0.0)
    s = x.sum()
    if s <= 0:
        x = np.ones_like(x)
        s = x.sum()
    x = x / s
    res = math.inf
    lam = 0.0
    for _ in range(max_iter):
        y = a @ x
        lam = y.sum()
        if lam <= 0:
            raise ConvergenceError("iterate vanished (nilpotent operator)", parameter="op",
                                   residual=res)
        y /= lam
        res = np.abs(y - x).sum()
        x = y
        if res <= tol:
            return float(lam), x
    raise ConvergenceError(f"{side} power iteration did not converge in {max_iter} steps",
                           parameter="max_iter", residual=float(res))


def _second_magnitude(mt, p, v, lam, iters: int = 400) -> float:
    scale = float(v @ p)
    if scale <= 0:
        return float("nan")
    rng = np.random.default_rng(12345)
    x = rng.standard_normal(len(p))
    x -= (v @ x) / scale * p
    logs = []
    for _ in range(iters):
        y = mt @ x
        y -= (v @ y) / scale * p
        nrm = np.abs(y).sum()
        nx = np.abs(x).sum()
        if nrm == 0.0 or nx == 0.0 or nrm < 1e-280:
            return 0.0
        logs.append(math.log(nrm / nx))
        x = y / nrm
    tail = logs[len(logs) // 2:]
    return float(math.exp(sum(tail) / len(tail)))


@dataclass(frozen=True, eq=False)
class SpectralSolution:
    """Eigendata of the open operator.

    ``h0`` is a per-bin density with ∫_{X0} h0 dm = 1; ``mu0`` and
    ``lambda_weights`` are per-bin probability weights.
    """

    alpha: float
    h0: np.ndarray
    mu0: np.ndarray
    lambda_weights: np.ndarray
    gap: float
    h_minus: float
    lambda2_abs: float
    partition: BinPartition
    operator: DiscretizedOperator
    system: OpenSystem
    refine_depth: int = 40

    @property
    def exact(self) -> bool:
        """True when sub-bin masses can be refined through the conformal relation."""
        return self.partition.markov and self.system.map.affine

    @property
    def h0_mass(self) -> np.ndarray:
        return self.h0 * self.partition.widths

    @property
    def escape_rate(self) -> float:
        return escape_rate(self.alpha)

    def __post_init__(self):
        bp = self.partition.breakpoints
        object.__setattr__(self, "_cum_mu0", np.concatenate(([0.0], np.cumsum(self.mu0))))
        object.__setattr__(self, "_cum_lam", np.concatenate(([0.0], np.cumsum(self.lambda_weights))))
        object.__setattr__(self, "_cum_nu",
                           np.concatenate(([0.0], np.cumsum(self.h0 * np.diff(bp)))))
        object.__setattr__(self, "_z_norm", float(np.sum(self.h0 * self.mu0)))
        tmap = self.system.map
        mids = 0.5 * (bp[:-1] + bp[1:])
        object.__setattr__(self, "_bin_branch", tmap.branch_indices(mids))
        pts = self.partition.exact_points
        object.__setattr__(self, "_exact_bp", list(pts) if pts is not None else None)

    # -- measures ---------------------------------------------------------

    def nu_measure(self, s: IntervalSet) -> float:
        """ν(s) for ν = 1_{X0} h0 m (exact for piecewise-constant h0)."""
        s = s & self.system.x0
        rows, lo, hi = _pieces(self.partition.breakpoints, s)
        return float(math.fsum(self.h0[rows] * (hi - lo)))

    def mu0_measure(self, s: IntervalSet, depth: int | None = None) -> float:
        d = self.refine_depth if depth is None else depth
        return float(math.fsum(self._mu0_interval(a, b, d) for a, b in s))

    def lambda_measure(self, s: IntervalSet, depth: int | None = None) -> float:
        """Λ(s) for the normalized invariant measure Λ ∝ h0 μ0."""
        d = self.refine_depth if depth is None else depth
        total = 0.0
        for a, b in s:
            total += self._lambda_interval(a, b, d)
        return total

    def lambda_ball(self, z, r: float, depth: int | None = None) -> float:
        """Λ(B(z, r)); exact-center refinement for balls below float resolution."""
        d = self.refine_depth if depth is None else depth
        if r <= 0:
            return 0.0
        if r > 1e-7 or not self.exact:
            return self.lambda_measure(ball_set(z, r), d)
        zq = z if isinstance(z, Fraction) else Fraction(float(z))
        total = 0.0
        for i, x, dl, dr in self._split_anchored(zq, r, r):
            if self.mu0[i] == 0.0:
                continue
            total += self.h0[i] * self._mu0_anchored_bin(i, x, dl, dr, d)
        return total / self._z_norm

    def mu0_ball(self, z, r: float) -> float:
        if r > 1e-7 or not self.exact:
            return self.mu0_measure(ball_set(z, r))
        zq = z if isinstance(z, Fraction) else Fraction(float(z))
        return float(sum(self._mu0_anchored_bin(i, x, dl, dr, self.refine_depth)
                         for i, x, dl, dr in self._split_anchored(zq, r, r)
                         if self.mu0[i] > 0))

    def on_partition(self, partition: BinPartition) -> tuple[np.ndarray, np.ndarray]:
        """(h0 mass, μ0 mass) per bin of a refinement of this solution's partition."""
        if partition is self.partition:
            return self.h0_mass, self.mu0
        bp = partition.breakpoints
        old = self.partition.locate(0.5 * (bp[:-1] + bp[1:]))
        obp = self.partition.breakpoints
        h = self.h0[old] * partition.widths
        mu = self.mu0[old].copy()
        same = (bp[:-1] == obp[old]) & (bp[1:] == obp[old + 1])
        for i in np.flatnonzero(~same):
            mu[i] = self._mu0_partial(int(old[i]), bp[i], bp[i + 1], self.refine_depth)
        return h, mu

    # -- internals ----------------------------------------------------------

    def _lambda_interval(self, a: float, b: float, depth: int) -> float:
        bp = self.partition.breakpoints
        a, b = max(a, 0.0), min(b, 1.0)
        if b <= a:
            return 0.0
        i0 = int(self.partition.locate(a))
        i1 = int(np.searchsorted(bp, b, side="left") - 1)
        if i0 == i1:
            return self.h0[i0] * self._mu0_partial(i0, a, b, depth) / self._z_norm
        total = self._cum_lam[i1] - self._cum_lam[i0 + 1]
        total += self.h0[i0] * self._mu0_partial(i0, a, bp[i0 + 1], depth) / self._z_norm
        total += self.h0[i1] * self._mu0_partial(i1, bp[i1], b, depth) / self._z_norm
        return float(total)

    def _mu0_interval(self, a: float, b: float, depth: int) -> float:
        bp = self.partition.breakpoints
        a, b = max(a, 0.0), min(b, 1.0)
        if b <= a:
            return 0.0
        i0 = int(self.partition.locate(a))
        i1 = int(np.searchsorted(bp, b, side="left") - 1)
        if i0 == i1:
            return self._mu0_partial(i0, a, b, depth)
        total = self._cum_mu0[i1] - self._cum_mu0[i0 + 1]
        total += self._mu0_partial(i0, a, bp[i0 + 1], depth)
        total += self._mu0_partial(i1, bp[i1], b, depth)
        return float(total)

    def _mu0_partial(self, i: int, a: float, b: float, depth: int) -> float:
        m = self.mu0[i]
        if m == 0.0:
            return 0.0
        bp = self.partition.breakpoints
        w = bp[i + 1] - bp[i]
        frac = (b - a) / w
        if frac >= 1.0 - 1e-12:
            return m
        if frac <= 1e-13 or depth <= 0 or not self.exact:
            return m * frac
        br = self.system.map.branches[self._bin_branch[i]]
        s, o = float(br.slope), float(br.offset)
        ya, yb = s * a + o, s * b + o
        if ya > yb:
            ya, yb = yb, ya
        return self._mu0_interval(ya, yb, depth - 1) / (self.alpha * abs(s))

    def _split_anchored(self, x: Fraction, dl: float, dr: float):
        """Split [x - dl, x + dr) into single-bin pieces anchored at exact points."""
        ebp = self._exact_bp
        out = []
        # right part [x, x + dr)
        j = bisect.bisect_right(ebp, x) - 1
        j = min(max(j, 0), len(ebp) - 2)
        anchor, rem = x, dr
        while rem > 0 and j < len(ebp) - 1:
            room = float(ebp[j + 1] - anchor)
            take = min(rem, room)
            if take > 0:
                out.append((j, anchor, 0.0, take))
            rem -= take
            anchor = ebp[j + 1]
            j += 1
        # left part [x - dl, x)
        j = bisect.bisect_left(ebp, x) - 1
        anchor, rem = x, dl
        while rem > 0 and j >= 0:
            room = float(anchor - ebp[j])
            take = min(rem, room)
            if take > 0:
                out.append((j, anchor, take, 0.0))
            rem -= take
            anchor = ebp[j]
            j -= 1
        return out

    def _mu0_anchored_bin(self, i: int, x: Fraction, dl: float, dr: float, depth: int,
                          max_steps: int = 4000) -> float:
        """μ0 of [x - dl, x + dr) lying inside bin i, pushed forward until resolvable."""
        scale = 1.0
        for _ in range(max_steps):
            if self.mu0[i] == 0.0:
                return 0.0
            if dl + dr > 1e-7:
                xf = float(x)
                return scale * self._mu0_partial(i, xf - dl, xf + dr, depth)
            br = self.system.map.branches[self._bin_branch[i]]
            s = br.slope
            x = br.value(x)
            sf = abs(float(s))
            dl, dr = (dl * sf, dr * sf) if s > 0 else (dr * sf, dl * sf)
            scale /= self.alpha * sf
            pieces = self._split_anchored(x, dl, dr)
            if len(pieces) != 1:
                return scale * sum(self._mu0_anchored_bin(j, a, l, r, depth)
                                   for j, a, l, r in pieces)
            i, x, dl, dr = pieces[0]
        w = self.partition.widths[i]
        return scale * self.mu0[i] * (dl + dr) / w


def spectral_solution(sys: OpenSystem, partition: BinPartition, tol: float = 1e-12,
                      max_iter: int = 100_000, refine_depth: int = 40) -> SpectralSolution:
    """α, h0, μ0 and Λ from the open operator."""
    op = build_operator(sys, partition, "open")
    lam, p, v, lam2 = leading_eigs(op, tol, max_iter)
    w = partition.widths
    x0frac = partition.overlap_fraction(sys.x0)
    p = p / float(np.sum(p * x0frac))
    h0 = p / w
    mu0 = v * w
    mu0 = mu0 / mu0.sum()
    lam_w = h0 * mu0
    if lam_w.sum() > 0:
        lam_w = lam_w / lam_w.sum()
    supp = lam_w > 1e-12
    h_minus = float(h0[supp].min()) if supp.any() else 0.0
    return SpectralSolution(alpha=lam, h0=h0, mu0=mu0, lambda_weights=lam_w,
                            gap=lam - lam2 if not math.isnan(lam2) else float("nan"),
                            h_minus=h_minus, lambda2_abs=lam2, partition=partition,
                            operator=op, system=sys, refine_depth=refine_depth)


def escape_rate(alpha: float) -> float:
    """η = -log α."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if alpha > 1:
        raise ValueError("alpha must not exceed 1")
    return -math.log(alpha)


# ---------------------------------------------------------------------------
# diagnostics


def check_operator_closeness(sys: OpenSystem, partition: BinPartition,
                             generations: int = 10) -> float:
    """Surrogate for |||L - L0|||_1 over dyadic indicators of BV norm <= 1."""
    if sys.closed:
        return 0.0
    diff = build_operator(sys, partition, "closed").matrix - build_operator(sys, partition, "open").matrix
    bp = partition.breakpoints
    rows, cols, vals, norms = [], [], [], []
    r = 0
    for g in range(generations + 1):
        n = 1 << g
        for j in range(n):
            a, b = j / n, (j + 1) / n
            br, lo, hi = _pieces(bp, IntervalSet.of((a, b)))
            rows.append(np.full(len(br), r))
            cols.append(br)
            vals.append(hi - lo)
            jumps = (a > 0) + (b < 1)
            norms.append(jumps + (b - a))
            r += 1
    f = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(r, partition.k))
    out = f @ diff
    l1 = np.asarray(abs(out).sum(axis=1)).ravel()
    return float(np.max(l1 / np.array(norms)))


def check_hole_smallness(sol: SpectralSolution, beta: float, d_const: float) -> bool:
    """True iff α > D / β."""
    if not d_const > 1:
        raise ValueError("d_const must exceed 1")
    return sol.alpha > d_const / beta


def aligned_radii(partition: BinPartition, z, r_min: float, r_max: float,
                  limit: int = 64) -> list[float]:
    """Radii r in [r_min, r_max] for which z - r and z + r are both breakpoints."""
    if partition.exact_points is None:
        return []
    zq = as_fraction(z) if not isinstance(z, float) else Fraction(z)
    pts = partition.exact_points
    lo = bisect.bisect_left(pts, zq)
    right = {p - zq for p in pts[lo:lo + 4 * limit + 64] if p > zq}
    out = []
    for p in reversed(pts[max(0, lo - 4 * limit - 64):lo]):
        d = zq - p
        if d in right and r_min <= d <= r_max:
            out.append(float(d))
    return sorted(set(out), reverse=True)[:limit]


# ---------------------------------------------------------------------------
# perturbed operators


def _perturbed_setup(sys, sol, partition, z, r, align):
    """Target-perturbed operator for B(z, r), on a ball-aligned refinement if possible."""
    ball = ball_set(z, r)
    ref = refine_partition(sys, partition, _ball_points(z, r)) if align and sol.exact else None
    if ref is None:
        return build_operator(sys, partition, "target_perturbed", ball), sol.h0_mass, ref
    h, _ = sol.on_partition(ref)
    return build_operator(sys, ref, "target_perturbed", ball), h, ref


def evd_operator_curve(sys: OpenSystem, sol: SpectralSolution, partition: BinPartition,
                       z, u_seq: Sequence[float], n_values: Sequence[int] | None = None,
                       align: bool = True) -> np.ndarray:
    """P_n(M_n <= u_n) = α^{-(n-1)} ∫ (L̃_n)^n h0 dm for each (n, u_n).

    In Markov-affine mode the partition is refined by z ± r and their
    forward orbits, so the perturbed operator is exact; otherwise a bin
    partly covered by the ball keeps its uncovered mass fraction.  Each step
    is divided by α to avoid underflow.
    """
    u_seq = list(u_seq)
    if n_values is None:
        n_values = range(1, len(u_seq) + 1)
    out = []
    for n, u in zip(n_values, u_seq):
        op, h, _ = _perturbed_setup(sys, sol, partition, z, math.exp(-u), align)
        mt = op.transpose
        p = h.copy()
        for _ in range(int(n)):
            p = (mt @ p) / sol.alpha
        out.append(float(sol.alpha * p.sum()))
    return np.array(out)


@dataclass(frozen=True)
class PerturbedSpectrum:
    radii: np.ndarray
    lambda_n: np.ndarray
    delta_n: np.ndarray
    slope_estimates: np.ndarray
    disjoint: np.ndarray

    def extrapolate(self) -> tuple[float, float]:
        """θ from a linear fit of slope against Δ, evaluated at Δ = 0.

        Returns ``(theta, spread)`` where spread is the range of the slopes
        used.
        """
        m = (self.delta_n > 0) & np.isfinite(self.slope_estimates)
        d, s = self.delta_n[m], self.slope_estimates[m]
        if len(d) == 0:
            return float("nan"), float("nan")
        if len(d) < 3:
            return float(s[np.argmin(d)]), float(np.ptp(s))
        coef = np.polyfit(d, s, 1)
        return float(coef[1]), float(np.ptp(s))


def perturbed_eigenvalue_curve(sys: OpenSystem, sol: SpectralSolution, partition: BinPartition,
                               z, radii: Sequence[float], on_survivor: bool | None = None,
                               tol: float = 1e-13, align: bool = True) -> PerturbedSpectrum:
    """Top eigenvalue λ_n of the target-perturbed operator for each radius.

    When every bin meeting the ball inside X0 has zero μ0 weight, the left
    eigenvector of L0 is still an eigenvector of the perturbed matrix and
    λ_n = α holds exactly; that case is reported without iterating.
    """
    radii = np.asarray(radii, dtype=float)
    if np.any(np.diff(radii) > 0):
        raise ValueError("radii must be decreasing")
    lam, delta, disjoint = [], [], []
    for r in radii:
        ball = ball_set(z, r)
        cut = ball & sys.x0
        rows, _, _ = _pieces(partition.breakpoints, cut)
        mass = float(sol.lambda_ball(z, r))
        d = sol.alpha * mass
        if not np.any(sol.mu0[rows] > 0):
            lam.append(sol.alpha)
            disjoint.append(True)
            if on_survivor:
                raise InconsistentClassificationError(
                    f"ball of radius {r!r} carries no Λ-mass but z is classified on the survivor set",
                    parameter="z")
        else:
            op, start, _ = _perturbed_setup(sys, sol, partition, z, r, align)
            ln, _, _, _ = leading_eigs(op, tol=tol, start=start, second=False)
            lam.append(min(ln, sol.alpha))
            disjoint.append(False)
        delta.append(d)
    lam = np.array(lam)
    delta = np.array(delta)
    with np.errstate(divide="ignore", invalid="ignore"):
        slopes = np.where(delta > 0, (sol.alpha - lam) / delta, np.nan)
    return PerturbedSpectrum(radii, lam, delta, slopes, np.array(disjoint))
