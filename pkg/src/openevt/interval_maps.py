"""Piecewise-expanding interval maps, holes and survivor sets.

Intervals are half-open ``[lo, hi)`` so that partitions tile ``[0, 1)``
without double counting; the point 1 is identified with the limit from the
left.  Affine branches keep their coefficients as exact fractions, which
makes preimages, orbits of rational points and Markov closures exact.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import AmbiguousPointError

Number = float | Fraction


def as_fraction(x) -> Fraction:
    """Exact rational for a config-style number.

    Floats are read through their shortest decimal representation, so
    ``0.3`` becomes ``3/10`` rather than the nearest dyadic.  Strings such
    as ``"1/3"`` are accepted.
    """
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (int, np.integer)):
        return Fraction(int(x))
    if isinstance(x, str):
        return Fraction(x.strip())
    return Fraction(repr(float(x)))


# ---------------------------------------------------------------------------
# interval algebra


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        if not (0.0 <= self.lo < self.hi <= 1.0):
            raise ValueError(f"need 0 <= lo < hi <= 1, got [{self.lo}, {self.hi})")

    @property
    def length(self) -> float:
        return self.hi - self.lo


def _normalize(pairs: Iterable[tuple[float, float]]) -> tuple[tuple[float, float], ...]:
    clipped = []
    for a, b in pairs:
        a, b = max(0.0, float(a)), min(1.0, float(b))
        if b > a:
            clipped.append((a, b))
    clipped.sort()
    out: list[list[float]] = []
    for a, b in clipped:
        if out and a <= out[-1][1]:
            if b > out[-1][1]:
                out[-1][1] = b
        else:
            out.append([a, b])
    return tuple((a, b) for a, b in out)


@dataclass(frozen=True)
class IntervalSet:
    """Finite disjoint union of half-open subintervals of [0, 1).

    Components are kept sorted; touching components are merged on
    construction.
    """

    components: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "components", _normalize(self.components))

    @classmethod
    def of(cls, *pairs) -> "IntervalSet":
        return cls(tuple(pairs))

    @classmethod
    def full(cls) -> "IntervalSet":
        return cls(((0.0, 1.0),))

    @classmethod
    def empty(cls) -> "IntervalSet":
        return cls(())

    def __len__(self):
        return len(self.components)

    def __iter__(self):
        return iter(self.components)

    def __bool__(self):
        return bool(self.components)

    @property
    def measure(self) -> float:
        return math.fsum(b - a for a, b in self.components)

    def contains(self, x: float) -> bool:
        x = float(x)
        if x == 1.0:
            return bool(self.components) and self.components[-1][1] == 1.0
        i = bisect.bisect_right([a for a, _ in self.components], x) - 1
        return i >= 0 and x < self.components[i][1]

    def __contains__(self, x):
        return self.contains(x)

    def distance(self, x: float) -> float:
        """Distance from ``x`` to the closure of the set (inf if empty)."""
        if not self.components:
            return math.inf
        x = float(x)
        best = math.inf
        for a, b in self.components:
            if a <= x <= b:
                return 0.0
            best = min(best, abs(x - a), abs(x - b))
        return best

    def complement(self) -> "IntervalSet":
        gaps = []
        prev = 0.0
        for a, b in self.components:
            if a > prev:
                gaps.append((prev, a))
            prev = b
        if prev < 1.0:
            gaps.append((prev, 1.0))
        return IntervalSet(tuple(gaps))

    def union(self, other: "IntervalSet") -> "IntervalSet":
        return IntervalSet(self.components + other.components)

    def intersection(self, other: "IntervalSet") -> "IntervalSet":
        a, b = self.components, other.components
        i = j = 0
        out = []
        while i < len(a) and j < len(b):
            lo = max(a[i][0], b[j][0])
            hi = min(a[i][1], b[j][1])
            if hi > lo:
                out.append((lo, hi))
            if a[i][1] < b[j][1]:
                i += 1
            else:
                j += 1
        return IntervalSet(tuple(out))

    def difference(self, other: "IntervalSet") -> "IntervalSet":
        return self.intersection(other.complement())

    def issubset(self, other: "IntervalSet") -> bool:
        return not self.difference(other)

    __or__ = union
    __and__ = intersection
    __sub__ = difference

    def __invert__(self):
        return self.complement()

    def __repr__(self):
        body = ", ".join(f"[{a!r}, {b!r})" for a, b in self.components)
        return f"IntervalSet({body})"


# ---------------------------------------------------------------------------
# maps


@dataclass(frozen=True)
class Branch:
    """One monotone expanding branch of a piecewise map.

    Affine branches carry exact ``slope``/``offset``; smooth branches carry
    ``func`` and ``deriv`` callables and are inverted by bracketing.
    """

    lo: Number
    hi: Number
    slope: Fraction | None = None
    offset: Fraction | None = None
    func: Callable[[float], float] | None = field(default=None, compare=False)
    deriv: Callable[[float], float] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.slope is None and (self.func is None or self.deriv is None):
            raise ValueError("branch needs slope/offset or func/deriv")
        if self.slope is not None:
            object.__setattr__(self, "slope", as_fraction(self.slope))
            object.__setattr__(self, "offset", as_fraction(self.offset or 0))
            object.__setattr__(self, "lo", as_fraction(self.lo))
            object.__setattr__(self, "hi", as_fraction(self.hi))
        if not self.lo < self.hi:
            raise ValueError("empty branch domain")

    @property
    def affine(self) -> bool:
        return self.slope is not None

    @property
    def increasing(self) -> bool:
        if self.affine:
            return self.slope > 0
        mid = 0.5 * (float(self.lo) + float(self.hi))
        return self.deriv(mid) > 0

    def value(self, x):
        if self.affine:
            if isinstance(x, Fraction):
                return self.slope * x + self.offset
            return float(self.slope) * x + float(self.offset)
        return self.func(x)

    def derivative(self, x) -> float:
        if self.affine:
            return float(self.slope)
        return float(self.deriv(float(x)))

    def image(self) -> tuple[float, float]:
        """Closed image interval ``(min, max)`` of the branch domain."""
        if self.affine:
            a, b = self.value(self.lo), self.value(self.hi)
        else:
            a, b = self.func(float(self.lo)), self.func(float(self.hi))
        return (min(a, b), max(a, b))

    def inverse(self, y):
        if self.affine:
            if isinstance(y, Fraction):
                return (y - self.offset) / self.slope
            return (y - float(self.offset)) / float(self.slope)
        lo, hi = float(self.lo), float(self.hi)
        return brentq(lambda t: self.func(t) - y, lo, hi, xtol=1e-13, rtol=1e-15)

    def min_abs_derivative(self, samples: int = 2049) -> float:
        if self.affine:
            return abs(float(self.slope))
        xs = np.linspace(float(self.lo), float(self.hi), samples)
        return float(min(abs(self.deriv(x)) for x in xs))


class PiecewiseExpandingMap:
    """Uniformly expanding map of [0, 1] given by monotone branches.

    The branch domains must tile [0, 1] in order.  At a shared endpoint the
    branch starting there is used (right-continuous convention).
    """

    def __init__(self, branches: Sequence[Branch], name: str = "custom"):
        self.branches = tuple(sorted(branches, key=lambda b: float(b.lo)))
        self.name = name
        bs = self.branches
        if not bs or float(bs[0].lo) != 0.0 or float(bs[-1].hi) != 1.0:
            raise ValueError("branch domains must cover [0, 1]")
        for left, right in zip(bs, bs[1:]):
            if left.hi != right.lo:
                raise ValueError("branch domains must be contiguous and disjoint")
        for b in bs:
            ylo, yhi = b.image()
            if ylo < -1e-12 or yhi > 1 + 1e-12:
                raise ValueError(f"branch on [{b.lo}, {b.hi}) leaves [0, 1]")
        self.beta = min(b.min_abs_derivative() for b in bs)
        if not self.beta > 1.0:
            raise ValueError(f"map is not uniformly expanding (beta={self.beta})")
        self.affine = all(b.affine for b in bs)
        self._lows = np.array([float(b.lo) for b in bs])
        if self.affine:
            self._slopes = np.array([float(b.slope) for b in bs])
            self._offsets = np.array([float(b.offset) for b in bs])

    def __repr__(self):
        return f"PiecewiseExpandingMap({self.name!r}, {len(self.branches)} branches)"

    @property
    def boundaries(self) -> tuple[float, ...]:
        """Interior branch boundaries."""
        return tuple(float(b.lo) for b in self.branches[1:])

    @property
    def full_branch_flag(self) -> bool:
        for b in self.branches:
            lo, hi = b.image()
            if abs(lo) > 1e-12 or abs(hi - 1) > 1e-12:
                return False
        return True

    @property
    def markov_flag(self) -> bool:
        return markov_closure(self) is not None

    def branch_index(self, x) -> int:
        i = bisect.bisect_right(self._lows, float(x)) - 1
        return min(max(i, 0), len(self.branches) - 1)

    def branch_indices(self, x: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self._lows, x, side="right") - 1
        return np.clip(idx, 0, len(self.branches) - 1)

    def __call__(self, x):
        if isinstance(x, np.ndarray):
            return self.apply(x)
        return self.branches[self.branch_index(x)].value(x)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Vectorized evaluation on a float array."""
        idx = self.branch_indices(x)
        if self.affine:
            y = self._slopes[idx] * x + self._offsets[idx]
        else:
            y = np.empty_like(x)
            for i, b in enumerate(self.branches):
                m = idx == i
                if m.any():
                    y[m] = np.vectorize(b.func, otypes=[float])(x[m])
        return np.clip(y, 0.0, 1.0)


def doubling_map() -> PiecewiseExpandingMap:
    return PiecewiseExpandingMap(
        [Branch(0, Fraction(1, 2), 2, 0), Branch(Fraction(1, 2), 1, 2, -1)], name="doubling"
    )


def tent_map() -> PiecewiseExpandingMap:
    return PiecewiseExpandingMap(
        [Branch(0, Fraction(1, 2), 2, 0), Branch(Fraction(1, 2), 1, -2, 2)], name="tent"
    )


def linear_markov_map(slopes: Sequence) -> PiecewiseExpandingMap:
    """Full-branch increasing affine map with the given slope table.

    Branch ``i`` has length ``1/slopes[i]`` and maps onto [0, 1]; the
    reciprocal slopes must sum to one.
    """
    qs = [as_fraction(s) for s in slopes]
    if sum(1 / s for s in qs) != 1:
        raise ValueError("reciprocal slopes must sum to 1")
    branches, lo = [], Fraction(0)
    for s in qs:
        if s <= 1:
            raise ValueError("slopes must exceed 1")
        hi = lo + 1 / s
        branches.append(Branch(lo, hi, s, -s * lo))
        lo = hi
    return PiecewiseExpandingMap(branches, name="linear_markov")


def affine_map(specs: Sequence[dict]) -> PiecewiseExpandingMap:
    """Map from ``[{"domain": [lo, hi], "slope": s, "offset": c}, ...]``."""
    branches = [
        Branch(as_fraction(d["domain"][0]), as_fraction(d["domain"][1]),
               as_fraction(d["slope"]), as_fraction(d.get("offset", 0)))
        for d in specs
    ]
    return PiecewiseExpandingMap(branches)


@dataclass(frozen=True)
class OpenSystem:
    """A map together with an absorbing hole.

    ``allow_closed`` admits an empty hole; it exists for closed-system
    controls only.
    """

    map: PiecewiseExpandingMap
    hole: IntervalSet
    allow_closed: bool = False

    def __post_init__(self):
        m = self.hole.measure
        if not m < 1.0:
            raise ValueError("hole must have measure < 1")
        if m <= 0.0 and not self.allow_closed:
            raise ValueError("hole must have positive measure (use allow_closed for controls)")

    @property
    def x0(self) -> IntervalSet:
        return self.hole.complement()

    @property
    def closed(self) -> bool:
        return self.hole.measure == 0.0

    def in_hole(self, x) -> bool:
        return self.hole.contains(x)

    def hole_mask(self, x: np.ndarray) -> np.ndarray:
        """Vectorized membership in the hole."""
        mask = np.zeros(x.shape, dtype=bool)
        for a, b in self.hole:
            if b == 1.0:
                mask |= x >= a
            else:
                mask |= (x >= a) & (x < b)
        return mask


# ---------------------------------------------------------------------------
# operations


def evaluate(tmap: PiecewiseExpandingMap, x):
    """T(x) with the right-continuous convention at branch endpoints."""
    return tmap(x)


def _check_not_boundary(tmap: PiecewiseExpandingMap, x, tol: float = 0.0, what: str = "x"):
    xf = float(x)
    for c in tmap.boundaries:
        if abs(xf - c) <= tol and (tol > 0 or x == c or xf == c):
            raise AmbiguousPointError(
                f"{what}={xf!r} lies on the branch boundary {c!r}; "
                "the continuity assumption at the target fails", parameter=what)


def derivative_at(tmap: PiecewiseExpandingMap, x) -> float:
    """Signed T'(x); ambiguous at an interior branch boundary."""
    _check_not_boundary(tmap, x)
    return tmap.branches[tmap.branch_index(x)].derivative(x)


def orbit_derivative(tmap: PiecewiseExpandingMap, x, p: int) -> float:
    """|(T^p)'(x)| as the product of |T'| along the orbit."""
    if p < 1:
        raise ValueError("p must be positive")
    prod = 1.0
    for _ in range(p):
        prod *= abs(derivative_at(tmap, x))
        x = tmap(x)
    return prod


def preimage_set(tmap: PiecewiseExpandingMap, s: IntervalSet) -> IntervalSet:
    """T^{-1}(s), exact for affine branches."""
    pieces = []
    for b in tmap.branches:
        lo, hi = float(b.lo), float(b.hi)
        ylo, yhi = b.image()
        for a, c in s:
            a2, c2 = max(a, ylo), min(c, yhi)
            if c2 <= a2:
                continue
            u, v = b.inverse(a2), b.inverse(c2)
            if u > v:
                u, v = v, u
            u, v = max(u, lo), min(v, hi)
            if v > u:
                pieces.append((u, v))
    return IntervalSet(tuple(pieces))


def survivor_approx(sys: OpenSystem, n: int) -> IntervalSet:
    """X_n: points whose first n iterates stay out of the hole."""
    x0 = sys.x0
    xn = x0
    for _ in range(n):
        xn = x0 & preimage_set(sys.map, xn)
    return xn


@dataclass(frozen=True)
class TargetSpec:
    """Classification of a target point.

    ``kind`` is one of ``"periodic"``, ``"nonperiodic"``, ``"off_survivor"``.
    """

    z: float
    kind: str
    period: int | None = None
    z_exact: Fraction | None = None
    tol: float = 1e-9
    n_check: int = 64
    exit_step: int | None = None

    @property
    def on_survivor(self) -> bool:
        return self.kind != "off_survivor"

    def label(self) -> str:
        return f"periodic({self.period})" if self.kind == "periodic" else self.kind


def _exact_orbit_ok(tmap: PiecewiseExpandingMap, z) -> bool:
    return tmap.affine and isinstance(z, Fraction)


def classify_target(sys: OpenSystem, z, p_max: int = 16, n_check: int = 64,
                    tol: float = 1e-9) -> TargetSpec:
    """Periodic, nonperiodic or off the survivor set.

    Rational targets (``Fraction`` or strings like ``"1/3"``) on affine maps
    are iterated exactly; float targets use floating point with ``tol``.
    """
    if isinstance(z, str):
        z = as_fraction(z)
    tmap = sys.map
    zf = float(z)
    if not 0.0 <= zf <= 1.0:
        raise ValueError("z must lie in [0, 1]")
    exact = _exact_orbit_ok(tmap, z)
    meta = dict(tol=tol, n_check=n_check, z_exact=z if exact else None)
    if sys.in_hole(zf):
        return TargetSpec(zf, "off_survivor", exit_step=0, **meta)
    _check_not_boundary(tmap, z, tol, "z")
    x = z
    for i in range(1, n_check + 1):
        x = tmap(x)
        if sys.in_hole(float(x)):
            return TargetSpec(zf, "off_survivor", exit_step=i, **meta)
        close = (x == z) if exact else abs(float(x) - zf) <= tol
        if close and i <= p_max:
            return TargetSpec(zf, "periodic", period=i, **meta)
        _check_not_boundary(tmap, x, tol, "z")
    return TargetSpec(zf, "nonperiodic", **meta)


def singular_set_distance(tmap: PiecewiseExpandingMap, z, depth: int) -> float:
    """Distance from z to the preimages of order 0..depth of the branch boundaries."""
    zf = float(z)
    pts = set(tmap.boundaries)
    level = set(pts)
    for _ in range(depth):
        nxt = set()
        for y in level:
            for b in tmap.branches:
                ylo, yhi = b.image()
                if ylo <= y <= yhi:
                    x = b.inverse(y)
                    if float(b.lo) <= x <= float(b.hi):
                        nxt.add(float(x))
        level = nxt - pts
        pts |= nxt
    return min((abs(zf - p) for p in pts), default=math.inf)


def markov_closure(tmap: PiecewiseExpandingMap, points: Iterable = (),
                   max_points: int = 1 << 20) -> list[Fraction] | None:
    """Forward-invariant closure of the branch endpoints plus ``points``.

    Returns the sorted exact point set, or None if the map is not affine or
    the closure exceeds ``max_points`` (no finite Markov partition found).
    """
    if not tmap.affine:
        return None
    pts = {Fraction(0), Fraction(1)}
    for b in tmap.branches:
        pts.add(b.lo)
        pts.add(b.hi)
    pts.update(as_fraction(p) for p in points)
    frontier = list(pts)
    branches = tmap.branches
    while frontier:
        p = frontier.pop()
        for b in branches:
            if b.lo <= p <= b.hi:
                q = b.value(p)
                if q not in pts:
                    if not 0 <= q <= 1:
                        continue
                    pts.add(q)
                    frontier.append(q)
                    if len(pts) > max_points:
                        return None
    return sorted(pts)
