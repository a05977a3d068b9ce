"""Experiment configuration: a single JSON document.

Numbers are read as exact decimals where it matters (hole endpoints,
target, branch coefficients); a target may also be a fraction string such
as ``"1/3"``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .interval_maps import (IntervalSet, OpenSystem, PiecewiseExpandingMap, affine_map,
                            as_fraction, doubling_map, linear_markov_map, tent_map)

PIPELINES = ("spectral", "evd", "theta", "dimension", "degenerate", "all")


@dataclass(frozen=True)
class RadiusGrid:
    max: float = 2.0 ** -6
    min: float = 2.0 ** -14
    count: int = 9

    def values(self) -> list[float]:
        if self.count == 1:
            return [self.max]
        q = (self.min / self.max) ** (1.0 / (self.count - 1))
        return [self.max * q ** i for i in range(self.count)]


@dataclass(frozen=True)
class DimensionGrid:
    u_min: float = 5.0
    u_max: float = 200.0
    count: int = 40
    gev_n: tuple = (128, 256, 512, 1024, 2048)
    paths: int = 4000

    def u_values(self) -> list[float]:
        step = (self.u_max - self.u_min) / (self.count - 1)
        return [self.u_min + i * step for i in range(self.count)]


@dataclass(frozen=True)
class ExperimentConfig:
    map: dict
    hole: tuple
    target: object
    seed: int
    tau: tuple = (0.5, 1.0, 2.0)
    n_values: tuple = (10, 100, 1000)
    bins: int = 4096
    markov_mode: bool = True
    n_particles: int = 1_000_000
    d_const: float = 1.01
    p_max: int = 16
    output: str | None = None
    pipeline: str = "all"
    horizon: int = 40
    gumbel_n: int = 32
    k_max: int = 8
    survivor_depth: int = 20
    radii: RadiusGrid = field(default_factory=RadiusGrid)
    dimension: DimensionGrid = field(default_factory=DimensionGrid)

    # -- construction -------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}", parameter=sorted(extra)[0])
        for key in ("map", "hole", "target", "seed"):
            if key not in d:
                raise ConfigError(f"missing required key {key!r}", parameter=key)
        kw = dict(d)
        kw["hole"] = tuple(tuple(h) for h in d["hole"])
        for key in ("tau", "n_values"):
            if key in kw:
                kw[key] = tuple(kw[key])
        if "radii" in kw:
            kw["radii"] = RadiusGrid(**kw["radii"])
        if "dimension" in kw:
            dd = dict(kw["dimension"])
            if "gev_n" in dd:
                dd["gev_n"] = tuple(dd["gev_n"])
            kw["dimension"] = DimensionGrid(**dd)
        try:
            cfg = cls(**kw)
        except TypeError as e:
            raise ConfigError(str(e)) from None
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON: {e}", parameter="config") from None
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hole"] = [list(h) for h in self.hole]
        d["tau"] = list(self.tau)
        d["n_values"] = list(self.n_values)
        d["dimension"]["gev_n"] = list(self.dimension.gev_n)
        return d

    # -- checks --------------------------------------------------------------

    def check(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer", parameter="seed")
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}", parameter="pipeline")
        if not self.tau or any(not (isinstance(t, (int, float)) and t > 0) for t in self.tau):
            raise ConfigError("tau grid must be nonempty and positive", parameter="tau")
        n = list(self.n_values)
        if not n or any(not isinstance(v, int) or v < 1 for v in n) or any(b <= a for a, b in zip(n, n[1:])):
            raise ConfigError("n_values must be increasing positive integers", parameter="n_values")
        if not isinstance(self.bins, int) or self.bins < 2:
            raise ConfigError("bins must be an integer >= 2", parameter="bins")
        if not self.d_const > 1:
            raise ConfigError("d_const must exceed 1", parameter="d_const")
        if self.n_particles < 1000:
            raise ConfigError("n_particles must be at least 1000", parameter="n_particles")
        if self.p_max < 1:
            raise ConfigError("p_max must be positive", parameter="p_max")
        self.hole_set()
        self.build_map()
        self.target_value()
        r = self.radii
        if not (0 < r.min <= r.max < 1) or r.count < 1:
            raise ConfigError("radii need 0 < min <= max < 1 and count >= 1", parameter="radii")

    def hole_set(self) -> IntervalSet:
        pieces = []
        for h in self.hole:
            if len(h) != 2:
                raise ConfigError("hole intervals are [lo, hi] pairs", parameter="hole")
            lo, hi = (float(as_fraction(v)) for v in h)
            if not 0 <= lo < hi <= 1:
                raise ConfigError(f"hole interval {list(h)} must satisfy 0 <= lo < hi <= 1",
                                  parameter="hole")
            pieces.append((lo, hi))
        pieces.sort()
        for (a, b), (c, _) in zip(pieces, pieces[1:]):
            if c < b:
                raise ConfigError("hole intervals overlap", parameter="hole")
        s = IntervalSet(tuple(pieces))
        if not s.measure < 1:
            raise ConfigError("hole must not cover [0, 1]", parameter="hole")
        return s

    def build_map(self) -> PiecewiseExpandingMap:
        m = self.map
        if not isinstance(m, dict):
            raise ConfigError("map must be an object", parameter="map")
        try:
            if "builtin" in m:
                name = m["builtin"]
                if name == "doubling":
                    return doubling_map()
                if name == "tent":
                    return tent_map()
                if name == "linear_markov":
                    return linear_markov_map(m["slopes"])
                raise ConfigError(f"unknown builtin map {name!r}", parameter="map")
            if "branches" in m:
                return affine_map(m["branches"])
        except (KeyError, ValueError, ZeroDivisionError) as e:
            raise ConfigError(f"bad map specification: {e}", parameter="map") from None
        raise ConfigError("map needs 'builtin' or 'branches'", parameter="map")

    def target_value(self):
        t = self.target
        try:
            if isinstance(t, str):
                q = as_fraction(t)
            elif isinstance(t, (int, float)) and not isinstance(t, bool) and math.isfinite(t):
                q = as_fraction(t)
            else:
                raise ValueError
        except (ValueError, ZeroDivisionError):
            raise ConfigError("target must be a number or a fraction string", parameter="target") from None
        if not 0 <= q <= 1:
            raise ConfigError("target must lie in [0, 1]", parameter="target")
        return q

    def system(self) -> OpenSystem:
        hole = self.hole_set()
        return OpenSystem(self.build_map(), hole, allow_closed=hole.measure == 0)

    def exact_target(self):
        """Fraction for affine maps (exact orbits), float otherwise."""
        q = self.target_value()
        return q if self.build_map().affine else float(q)


def derive_seed(seed: int, tag: int) -> int:
    """Independent integer seed for one pipeline stage."""
    return int(np.random.SeedSequence(seed, spawn_key=(tag,)).generate_state(1, dtype=np.uint64)[0] >> 1)


__all__ = ["DimensionGrid", "ExperimentConfig", "PIPELINES", "RadiusGrid", "derive_seed"]
