"""
Germs: families x -> F_x of random distributions indexed by base points.
"""

from __future__ import annotations

import logging
import threading
from abc import ABC, abstractmethod
from collections import OrderedDict
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, List, Optional, Sequence, Tuple

import numpy as np

from ..config import settings
from ..exceptions import InvalidArgumentError, UnsupportedOperationError
from .distributions import RandomDistribution, WaveletPairings
from .grid_field import FieldKind, GridField
from .test_function import TestFunction

if TYPE_CHECKING:
    from ..services.increments import IndexSet
    from ..services.noise import NoiseSample
    from ..services.wavelets import WaveletBasisD

logger = logging.getLogger(__name__)

_GRID_EPS = 1e-9


@dataclass(frozen=True)
class CoherenceClass:
    alpha: Tuple[float, ...]
    gamma: Tuple[float, ...]
    delta: Tuple[float, ...]


class Germ(ABC):
    T: float
    d: int
    M: int
    adapted: bool = True
    linear_in_noise: bool = False
    declared: Optional[CoherenceClass] = None
    label: str = ""

    @abstractmethod
    def evaluate(self, x: Sequence[float], psi: TestFunction) -> np.ndarray:
        """Per-sample F_x(psi), shape (M,)."""

    @abstractmethod
    def wavelet_evaluations(self, theta: "IndexSet", x: Sequence[float], n, basis: "WaveletBasisD") -> WaveletPairings:
        """F_{pi^theta_y x}(phi^n_y) for every lattice translate y, values (M, K_1, ..., K_d)."""

    def cached_evaluations(self, theta: "IndexSet", x: Sequence[float], n,
                           basis: "WaveletBasisD") -> WaveletPairings:
        """wavelet_evaluations memoized per (theta, base point, level, basis)."""
        cache = self.__dict__.get("_evaluations")
        if cache is None:
            cache = self.__dict__.setdefault("_evaluations", EvaluationCache(settings.germ_cache_bytes))
        key = (theta.members, tuple(float(v) for v in np.asarray(x, dtype=float)),
               tuple(int(v) for v in np.atleast_1d(n)), id(basis))
        return cache.get_or_compute(key, basis, lambda: self.wavelet_evaluations(theta, x, n, basis))

    def rebuild(self, noise: "NoiseSample") -> "Germ":
        raise UnsupportedOperationError(f"Germ {self.label or type(self).__name__} is not a noise functional")

    def __add__(self, other: "Germ") -> "Germ":
        return CombinationGerm([(1.0, self), (1.0, other)])

    def __rmul__(self, c: float) -> "Germ":
        return CombinationGerm([(float(c), self)])


class EvaluationCache:
    """Least-recently-used store of lattice evaluations bounded by their total size in bytes."""

    def __init__(self, max_bytes: int):
        self.max_bytes = max_bytes
        self.hits = 0
        self.misses = 0
        self._entries: "OrderedDict[tuple, Tuple[object, WaveletPairings]]" = OrderedDict()
        self._bytes = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    def get_or_compute(self, key: tuple, basis: object, compute: Callable[[], WaveletPairings]) -> WaveletPairings:
        with self._lock:
            entry = self._entries.get(key)
            if entry is not None:
                self._entries.move_to_end(key)
                self.hits += 1
                return entry[1]
            self.misses += 1
        result = compute()
        size = result.values.nbytes
        if size > self.max_bytes:
            logger.debug(f"Lattice evaluation of {size} bytes exceeds the cache budget, not cached")
            return result
        with self._lock:
            # the basis is held so its id stays unique while the entry lives
            if key not in self._entries:
                self._entries[key] = (basis, result)
                self._bytes += size
            while self._bytes > self.max_bytes:
                _, (_, old) = self._entries.popitem(last=False)
                self._bytes -= old.values.nbytes
        return result


class DistributionGerm(Germ):
    """The x-independent germ F_x = f."""

    def __init__(self, dist: RandomDistribution):
        self.dist = dist
        self.T, self.d, self.M = dist.T, dist.d, dist.M
        self.adapted = dist.adapted
        self.linear_in_noise = dist.linear_in_noise
        self.label = dist.label

    def evaluate(self, x, psi):
        return self.dist.pair(psi)

    def wavelet_evaluations(self, theta, x, n, basis):
        from ..services.increments import IndexSet

        return self.dist.wavelet_pairings(IndexSet.empty(self.d), n, basis)

    def rebuild(self, noise):
        return DistributionGerm(self.dist.rebuild(noise))


class ProductGerm(Germ):
    """(Y . f)_x(psi) = Y(x) f(psi) for a corner field Y frozen at the base point."""

    def __init__(self, field: GridField, dist: RandomDistribution,
                 field_builder: Optional[Callable[["NoiseSample"], GridField]] = None,
                 declared: Optional[CoherenceClass] = None, label: str = ""):
        if field.kind != FieldKind.CORNER_VALUES:
            raise InvalidArgumentError("Germ coefficients must be corner-valued fields")
        if field.d != dist.d or not np.isclose(field.T, dist.T):
            raise InvalidArgumentError("Field and distribution live on different domains")
        if field.M != 1 and dist.M != 1 and field.M != dist.M:
            raise InvalidArgumentError(f"Sample counts {field.M} and {dist.M} do not broadcast")
        self.field = field
        self.dist = dist
        self.field_builder = field_builder
        self.T, self.d = dist.T, dist.d
        self.M = max(field.M, dist.M)
        self.adapted = field.adapted and dist.adapted
        self.linear_in_noise = dist.linear_in_noise and field.deterministic and field_builder is None
        self.declared = declared
        self.label = label or f"{field.label}*{dist.label}"

    def evaluate(self, x, psi):
        return self.field.at(np.asarray(x, dtype=float)) * self.dist.pair(psi)

    def base_values(self, theta: "IndexSet", x, levels, k_lo, shape) -> np.ndarray:
        """Y(pi^theta_y x) on the lattice, broadcastable to (M, K_1, ..., K_d)."""
        x = np.asarray(x, dtype=float)
        N = self.field.N
        h = self.field.h
        index = []
        for i in range(self.d):
            view = [1] * self.d
            if (i + 1) in theta:
                k = k_lo[i] + np.arange(shape[i])
                idx = np.floor(k * N / (1 << levels[i]) + _GRID_EPS).astype(int)
                view[i] = -1
                index.append(np.clip(idx, 0, N).reshape(view))
            else:
                idx = int(np.clip(np.floor(x[i] / h + _GRID_EPS), 0, N))
                index.append(np.full(view, idx))
        return self.field.data[(slice(None),) + tuple(index)]

    def wavelet_evaluations(self, theta, x, n, basis):
        from ..services.increments import IndexSet

        pairings = self.dist.wavelet_pairings(IndexSet.empty(self.d), n, basis)
        values = self.base_values(theta, x, pairings.levels, pairings.k_lo, pairings.values.shape[1:])
        return WaveletPairings(values * pairings.values, pairings.k_lo, pairings.levels)

    def rebuild(self, noise):
        if self.field_builder is not None:
            field = self.field_builder(noise)
        elif self.field.deterministic:
            field = self.field
        else:
            return super().rebuild(noise)
        return ProductGerm(field, self.dist.rebuild(noise), self.field_builder, self.declared, self.label)


class CombinationGerm(Germ):
    def __init__(self, terms: List[Tuple[float, Germ]]):
        if not terms:
            raise InvalidArgumentError("Empty germ combination")
        first = terms[0][1]
        if any(g.d != first.d or not np.isclose(g.T, first.T) for _, g in terms):
            raise InvalidArgumentError("Germs in a combination must share the domain")
        self.terms = list(terms)
        self.T, self.d = first.T, first.d
        self.M = max(g.M for _, g in terms)
        self.adapted = all(g.adapted for _, g in terms)
        self.linear_in_noise = all(g.linear_in_noise for _, g in terms)
        self.label = "+".join(f"{c:g}*{g.label}" for c, g in terms)

    def evaluate(self, x, psi):
        return sum(c * g.evaluate(x, psi) for c, g in self.terms)

    def wavelet_evaluations(self, theta, x, n, basis):
        parts = [(c, g.wavelet_evaluations(theta, x, n, basis)) for c, g in self.terms]
        values = sum(c * p.values for c, p in parts)
        return WaveletPairings(values, parts[0][1].k_lo, parts[0][1].levels)

    def rebuild(self, noise):
        return CombinationGerm([(c, g.rebuild(noise)) for c, g in self.terms])


def incoherent_field(N: int, T: float, d: int, seed: int) -> GridField:
    """Frozen +-1 field with independent corner signs: no Holder control at any scale."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    signs = np.where(rng.random((N + 1,) * d) < 0.5, -1.0, 1.0)
    return GridField(signs[None, ...], T, FieldKind.CORNER_VALUES, label="sign_field")
