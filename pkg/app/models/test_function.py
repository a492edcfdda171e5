"""
Compactly supported test functions sampled on a uniform evaluation grid.

A test function lives on 2^level cells per axis over [0,T]^d and is stored either
as d per-axis factors (separable) or as a dense array of midpoint samples. The
generating callable is kept so that rescaled copies are re-sampled exactly
instead of interpolated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from ..config import settings
from ..exceptions import InvalidArgumentError

Profile = Callable[[np.ndarray], np.ndarray]
DenseProfile = Callable[[np.ndarray], np.ndarray]
Box = Tuple[Tuple[float, float], ...]

# (1 - s^2)^4 on [-1, 1] has integral 256/315; the bump lives on [1/4, 3/4]
_BUMP_POWER = 4
_BUMP_NORMALIZER = 4.0 * 315.0 / 256.0


def midpoints(level: int, T: float) -> np.ndarray:
    h = T / (1 << level)
    return (np.arange(1 << level) + 0.5) * h


def bump_profile(u: np.ndarray) -> np.ndarray:
    """Unit-mass polynomial bump supported in [1/4, 3/4]."""
    s = 4.0 * np.asarray(u, dtype=float) - 2.0
    inside = np.abs(s) < 1.0
    return np.where(inside, _BUMP_NORMALIZER * (1.0 - s * s) ** _BUMP_POWER, 0.0)


@dataclass(frozen=True, eq=False)
class TestFunction:
    __test__ = False

    T: float
    d: int
    level: int
    support: Box
    profiles: Optional[Tuple[Profile, ...]] = None
    dense_profile: Optional[DenseProfile] = None
    smoothness: int = 0
    label: str = ""
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if (self.profiles is None) == (self.dense_profile is None):
            raise InvalidArgumentError("A test function needs either per-axis profiles or a dense profile")
        if self.profiles is not None and len(self.profiles) != self.d:
            raise InvalidArgumentError(f"Expected {self.d} profiles, got {len(self.profiles)}")
        if len(self.support) != self.d:
            raise InvalidArgumentError(f"Support box has {len(self.support)} sides for d={self.d}")
        if self.level < 0:
            raise InvalidArgumentError(f"Evaluation level must be non-negative, got {self.level}")

    # constructors -------------------------------------------------------------

    @classmethod
    def separable(cls, profiles: Sequence[Profile], T: float, support: Box, level: Optional[int] = None,
                  smoothness: int = 0, label: str = "") -> "TestFunction":
        level = settings.eval_level if level is None else level
        return cls(T, len(profiles), level, tuple(tuple(s) for s in support), profiles=tuple(profiles),
                   smoothness=smoothness, label=label)

    @classmethod
    def from_function(cls, func: DenseProfile, T: float, d: int, support: Box, level: Optional[int] = None,
                      smoothness: int = 0, label: str = "") -> "TestFunction":
        level = settings.eval_level if level is None else level
        return cls(T, d, level, tuple(tuple(s) for s in support), dense_profile=func,
                   smoothness=smoothness, label=label)

    @classmethod
    def from_values(cls, values: np.ndarray, T: float, label: str = "") -> "TestFunction":
        """Piecewise-constant test function from cell values on a 2^level grid."""
        values = np.asarray(values, dtype=float)
        d = values.ndim
        cells = values.shape[0]
        level = int(round(np.log2(cells)))
        if (1 << level) != cells or set(values.shape) != {cells}:
            raise InvalidArgumentError(f"Values must form a square power-of-two grid, got {values.shape}")
        h = T / cells
        frozen = values.copy()

        def lookup(points):
            idx = np.floor(np.asarray(points) / h).astype(int)
            inside = np.all((idx >= 0) & (idx < cells), axis=-1)
            idx = np.clip(idx, 0, cells - 1)
            return np.where(inside, frozen[tuple(np.moveaxis(idx, -1, 0))], 0.0)

        nz = np.nonzero(values)
        if len(nz[0]):
            support = tuple((float(a.min() * h), float((a.max() + 1) * h)) for a in nz)
        else:
            support = ((0.0, 0.0),) * d
        return cls(T, d, level, support, dense_profile=lookup, label=label)

    @classmethod
    def bump(cls, T: float, d: int, level: Optional[int] = None) -> "TestFunction":
        return cls.separable([bump_profile] * d, T, ((0.25, 0.75),) * d, level=level, smoothness=3,
                             label="bump")

    @classmethod
    def indicator(cls, s: Sequence[float], t: Sequence[float], T: float,
                  level: Optional[int] = None) -> "TestFunction":
        """Indicator of the box (s, t]."""
        if len(s) != len(t):
            raise InvalidArgumentError("Box corners of different dimension")
        if any(a > b for a, b in zip(s, t)):
            raise InvalidArgumentError(f"Box corners not ordered: {s} > {t}")
        profiles = tuple(_interval_profile(float(a), float(b)) for a, b in zip(s, t))
        support = tuple((float(a), float(b)) for a, b in zip(s, t))
        return cls.separable(profiles, T, support, level=level, label="indicator")

    @classmethod
    def constant(cls, value: float, T: float, d: int, level: Optional[int] = None) -> "TestFunction":
        profiles = [lambda z: np.ones_like(z)] * (d - 1) + [lambda z: np.full_like(z, float(value))]
        return cls.separable(profiles, T, ((0.0, T),) * d, level=level, label="constant")

    # sampling -----------------------------------------------------------------

    @property
    def is_separable(self) -> bool:
        return self.profiles is not None

    @property
    def h(self) -> float:
        return self.T / (1 << self.level)

    def factors(self) -> Tuple[np.ndarray, ...]:
        """Per-axis midpoint samples of a separable function."""
        if not self.is_separable:
            raise InvalidArgumentError("Dense test function has no per-axis factors")
        if "factors" not in self._cache:
            z = midpoints(self.level, self.T)
            self._cache["factors"] = tuple(np.asarray(p(z), dtype=float) for p in self.profiles)
        return self._cache["factors"]

    def values(self) -> np.ndarray:
        """Dense midpoint samples, shape (2^level,)*d."""
        if "values" not in self._cache:
            if self.is_separable:
                out = np.ones(())
                for f in self.factors():
                    out = np.multiply.outer(out, f)
                self._cache["values"] = out
            else:
                z = midpoints(self.level, self.T)
                grid = np.stack(np.meshgrid(*([z] * self.d), indexing="ij"), axis=-1)
                self._cache["values"] = np.asarray(self.dense_profile(grid), dtype=float)
        return self._cache["values"]

    def __call__(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if self.is_separable:
            out = np.ones(points.shape[:-1])
            for i, p in enumerate(self.profiles):
                out = out * p(points[..., i])
            return out
        return np.asarray(self.dense_profile(points), dtype=float)

    def cell_averages(self, level: int) -> np.ndarray | Tuple[np.ndarray, ...]:
        """Averages over cells of a 2^level grid: per-axis tuple if separable, dense array otherwise."""
        if level > self.level:
            raise InvalidArgumentError(f"Cannot average a level-{self.level} function onto level {level}")
        block = 1 << (self.level - level)
        if self.is_separable:
            return tuple(f.reshape(-1, block).mean(axis=1) for f in self.factors())
        vals = self.values()
        shape = []
        for _ in range(self.d):
            shape += [1 << level, block]
        return vals.reshape(shape).mean(axis=tuple(range(1, 2 * self.d, 2)))

    def integral(self) -> float:
        if self.is_separable:
            return float(np.prod([f.sum() * self.h for f in self.factors()]))
        return float(self.values().sum() * self.h ** self.d)

    def l2_norm(self) -> float:
        if self.is_separable:
            return float(np.sqrt(np.prod([(f ** 2).sum() * self.h for f in self.factors()])))
        return float(np.sqrt((self.values() ** 2).sum() * self.h ** self.d))

    def sup_norm(self) -> float:
        if self.is_separable:
            return float(np.prod([np.abs(f).max() for f in self.factors()]))
        return float(np.abs(self.values()).max())

    def in_domain(self) -> bool:
        tol = 1e-12 * self.T
        return all(a >= -tol and b <= self.T + tol for a, b in self.support)

    # transformations ---------------------------------------------------------

    def scaled(self, c: float) -> "TestFunction":
        if self.is_separable:
            first = self.profiles[0]
            profiles = (lambda z, f=first: c * f(z),) + self.profiles[1:]
            return TestFunction(self.T, self.d, self.level, self.support, profiles=profiles,
                                smoothness=self.smoothness, label=self.label)
        dense = self.dense_profile
        return TestFunction(self.T, self.d, self.level, self.support,
                            dense_profile=lambda p: c * dense(p), smoothness=self.smoothness, label=self.label)

    def with_level(self, level: int) -> "TestFunction":
        return TestFunction(self.T, self.d, level, self.support, profiles=self.profiles,
                            dense_profile=self.dense_profile, smoothness=self.smoothness, label=self.label)


def _interval_profile(a: float, b: float) -> Profile:
    def profile(z):
        z = np.asarray(z, dtype=float)
        return ((z > a) & (z <= b)).astype(float)

    return profile


def combine(terms: Sequence[Tuple[float, TestFunction]]) -> TestFunction:
    """Linear combination of test functions on a common grid (dense result)."""
    if not terms:
        raise InvalidArgumentError("Empty linear combination")
    first = terms[0][1]
    level = max(psi.level for _, psi in terms)
    support = tuple(
        (min(psi.support[i][0] for _, psi in terms), max(psi.support[i][1] for _, psi in terms))
        for i in range(first.d)
    )

    def func(points):
        return sum(c * psi(points) for c, psi in terms)

    return TestFunction.from_function(func, first.T, first.d, support, level=level)
