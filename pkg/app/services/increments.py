"""
Index subsets, coordinate projections and rectangular increments.

Members of an IndexSet are 1-based coordinates in {1, ..., d}; internally the set
is a bitmask over 0-based axes, and every subset enumeration walks the bitmasks in
increasing order so floating-point summation order is fixed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, List, Sequence, Tuple

import numpy as np

from ..config import settings
from ..exceptions import InvalidArgumentError

logger = logging.getLogger(__name__)

MultiFunction = Callable[[np.ndarray], "float | np.ndarray"]


@dataclass(frozen=True, order=True)
class IndexSet:
    """Subset of {1, ..., d} stored as a bitmask over 0-based axes."""

    mask: int
    d: int

    def __post_init__(self):
        if self.d < 1 or self.d > settings.max_dimension:
            raise InvalidArgumentError(
                f"Dimension {self.d} outside supported range 1..{settings.max_dimension}"
            )
        if self.mask < 0 or self.mask >> self.d:
            raise InvalidArgumentError(f"Mask {self.mask:b} has members outside 1..{self.d}")

    @classmethod
    def of(cls, members: Iterable[int], d: int) -> "IndexSet":
        mask = 0
        for i in members:
            if not 1 <= i <= d:
                raise InvalidArgumentError(f"Index {i} outside 1..{d}")
            if mask & (1 << (i - 1)):
                raise InvalidArgumentError(f"Duplicate index {i}")
            mask |= 1 << (i - 1)
        return cls(mask, d)

    @classmethod
    def empty(cls, d: int) -> "IndexSet":
        return cls(0, d)

    @classmethod
    def full(cls, d: int) -> "IndexSet":
        return cls((1 << d) - 1, d)

    @classmethod
    def all_subsets(cls, d: int) -> List["IndexSet"]:
        return cls.full(d).subsets()

    @property
    def members(self) -> Tuple[int, ...]:
        return tuple(i + 1 for i in range(self.d) if self.mask >> i & 1)

    @property
    def axes(self) -> Tuple[int, ...]:
        return tuple(i for i in range(self.d) if self.mask >> i & 1)

    def complement(self) -> "IndexSet":
        return IndexSet(((1 << self.d) - 1) & ~self.mask, self.d)

    def _check_same(self, other: "IndexSet") -> None:
        if other.d != self.d:
            raise InvalidArgumentError(f"Index sets over different dimensions {self.d} and {other.d}")

    def union(self, other: "IndexSet") -> "IndexSet":
        self._check_same(other)
        return IndexSet(self.mask | other.mask, self.d)

    def intersection(self, other: "IndexSet") -> "IndexSet":
        self._check_same(other)
        return IndexSet(self.mask & other.mask, self.d)

    def difference(self, other: "IndexSet") -> "IndexSet":
        self._check_same(other)
        return IndexSet(self.mask & ~other.mask, self.d)

    def isdisjoint(self, other: "IndexSet") -> bool:
        self._check_same(other)
        return not self.mask & other.mask

    def issubset(self, other: "IndexSet") -> bool:
        self._check_same(other)
        return self.mask & ~other.mask == 0

    def subsets(self) -> List["IndexSet"]:
        """All subsets in increasing bitmask order."""
        return [IndexSet(m, self.d) for m in range(self.mask + 1) if m & ~self.mask == 0]

    def __contains__(self, i: int) -> bool:
        return 1 <= i <= self.d and bool(self.mask >> (i - 1) & 1)

    def __iter__(self) -> Iterator[int]:
        return iter(self.members)

    def __len__(self) -> int:
        return bin(self.mask).count("1")

    def __bool__(self) -> bool:
        return self.mask != 0

    def label(self) -> str:
        return "{" + ",".join(str(i) for i in self.members) + "}"

    def __str__(self) -> str:
        return self.label()


def _as_point(x: Sequence[float], d: int | None = None) -> np.ndarray:
    point = np.asarray(x, dtype=float)
    if point.ndim != 1:
        raise InvalidArgumentError(f"Expected a point, got array of shape {point.shape}")
    if d is not None and point.shape[0] != d:
        raise InvalidArgumentError(f"Point has dimension {point.shape[0]}, expected {d}")
    return point


def project(theta: IndexSet, x: Sequence[float], y: Sequence[float]) -> np.ndarray:
    """Return y with the coordinates in theta replaced by those of x."""
    x = _as_point(x, theta.d)
    y = _as_point(y, theta.d)
    out = y.copy()
    axes = list(theta.axes)
    out[axes] = x[axes]
    return out


def rect_increment(theta: IndexSet, x: Sequence[float], y: Sequence[float], f: MultiFunction):
    """
    Rectangular increment of f in the directions theta between x and y.

    Args:
        theta: directions of the increment
        x, y: corners of the box
        f: callable on points; may return a scalar or per-sample array

    Returns:
        sum over subsets theta' of theta of (-1)^#(theta minus theta') f(x with theta' from y)
    """
    x = _as_point(x, theta.d)
    y = _as_point(y, theta.d)
    total = 0.0
    for sub in theta.subsets():
        sign = -1.0 if (len(theta) - len(sub)) % 2 else 1.0
        total = total + sign * f(project(sub, y, x))
    return total


def check_composition_identity(theta1: IndexSet, theta2: IndexSet, x, y, f: MultiFunction,
                               tol: float | None = None) -> bool:
    """Check that the theta1 increment of the theta2 increment is the joint increment."""
    if not theta1.isdisjoint(theta2):
        raise InvalidArgumentError(f"Index sets {theta1} and {theta2} are not disjoint")
    tol = settings.identity_tolerance if tol is None else tol
    y = _as_point(y, theta1.d)

    def inner(z):
        return rect_increment(theta2, z, y, f)

    lhs = rect_increment(theta1, x, y, inner)
    rhs = rect_increment(theta1.union(theta2), x, y, f)
    return bool(np.all(np.abs(np.asarray(lhs) - np.asarray(rhs)) <= tol * max(1.0, float(np.max(np.abs(rhs))))))


def check_product_identity(theta: IndexSet, x, y, f: MultiFunction, g: MultiFunction,
                           tol: float | None = None) -> bool:
    """Check the Leibniz rule for rectangular increments over all covers of theta."""
    tol = settings.identity_tolerance if tol is None else tol
    lhs = rect_increment(theta, x, y, lambda z: f(z) * g(z))
    rhs = 0.0
    subsets = theta.subsets()
    for theta1 in subsets:
        for theta2 in subsets:
            if theta1.union(theta2) == theta:
                rhs = rhs + rect_increment(theta1, x, y, f) * rect_increment(theta2, x, y, g)
    scale = max(1.0, float(np.max(np.abs(lhs))))
    return bool(np.all(np.abs(np.asarray(lhs) - np.asarray(rhs)) <= tol * scale))


def shift_expand(theta: IndexSet, eta: IndexSet, x, y) -> List[Tuple[float, np.ndarray, IndexSet]]:
    """
    Terms of the shifted expansion of the theta increment over eta = eta1 + eta2.

    Each term is (sign, base point, index set) standing for
    sign * rect_increment(index set, base point, y, f).
    """
    if not theta.isdisjoint(eta):
        raise InvalidArgumentError(f"Index sets {theta} and {eta} overlap")
    x = _as_point(x, theta.d)
    y = _as_point(y, theta.d)
    terms = []
    for eta2 in eta.subsets():
        eta1 = eta.difference(eta2)
        sign = -1.0 if len(eta2) % 2 else 1.0
        terms.append((sign, project(eta1, y, x), theta.union(eta2)))
    return terms


def evaluate_terms(terms: List[Tuple[float, np.ndarray, IndexSet]], y, f: MultiFunction):
    """Sum the terms produced by shift_expand for a given function."""
    total = 0.0
    for sign, base, index_set in terms:
        total = total + sign * rect_increment(index_set, base, y, f)
    return total
