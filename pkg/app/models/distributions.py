"""
Random distributions realized on a dyadic cell grid.

Every distribution here is a cell measure: an ensemble of per-cell masses that
pairs with a test function through its cell averages. White noise, the
distributional derivative of a corner field and Lebesgue densities are all of
this form.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Optional

import numpy as np

from ..exceptions import InvalidArgumentError, UnsupportedOperationError
from .grid_field import DeclaredClass, FieldKind, GridField
from .test_function import TestFunction

if TYPE_CHECKING:
    from ..services.increments import IndexSet
    from ..services.noise import NoiseSample
    from ..services.wavelets import WaveletBasisD

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WaveletPairings:
    """Pairings of an ensemble with all lattice translates: values (M, K_1, ..., K_d)."""

    values: np.ndarray
    k_lo: tuple
    levels: tuple


class RandomDistribution(ABC):
    T: float
    d: int
    M: int
    linear_in_noise: bool = False
    adapted: bool = True
    declared: Optional[DeclaredClass] = None
    label: str = ""

    @abstractmethod
    def pair(self, psi: TestFunction) -> np.ndarray:
        """Per-sample values f(psi), shape (M,)."""

    @abstractmethod
    def wavelet_pairings(self, zeta: "IndexSet", n, basis: "WaveletBasisD") -> WaveletPairings:
        """f(phi_hat^{zeta,n}_y) for every lattice translate y."""

    def rebuild(self, noise: "NoiseSample") -> "RandomDistribution":
        """The same construction evaluated on another noise realization."""
        raise UnsupportedOperationError(f"Distribution {self.label or type(self).__name__} is not a noise functional")


class CellMeasure(RandomDistribution):
    def __init__(self, masses: GridField, linear_in_noise: bool = False,
                 builder: Optional[Callable[["NoiseSample"], "CellMeasure"]] = None,
                 declared: Optional[DeclaredClass] = None, label: str = ""):
        if masses.kind != FieldKind.CELL_DENSITY:
            raise InvalidArgumentError("A cell measure is built from a cell-density field")
        self.masses = masses
        self.T = masses.T
        self.d = masses.d
        self.M = masses.M
        self.linear_in_noise = linear_in_noise
        self.adapted = masses.adapted
        self.declared = declared if declared is not None else masses.declared
        self.label = label or masses.label
        self._builder = builder

    @property
    def N(self) -> int:
        return self.masses.N

    @property
    def deterministic(self) -> bool:
        return self._builder is None and self.M == 1

    def _averages(self, psi: TestFunction):
        p = int(round(np.log2(self.N)))
        if psi.level >= p:
            return psi.cell_averages(p)
        # psi is coarser than the cells: every fine cell inherits its coarse value
        rep = 1 << (p - psi.level)
        if psi.is_separable:
            return tuple(np.repeat(f, rep) for f in psi.factors())
        vals = psi.values()
        for axis in range(self.d):
            vals = np.repeat(vals, rep, axis=axis)
        return vals

    def pair(self, psi: TestFunction) -> np.ndarray:
        if psi.d != self.d or not np.isclose(psi.T, self.T):
            raise InvalidArgumentError("Test function and distribution live on different domains")
        averages = self._averages(psi)
        out = self.masses.data
        if isinstance(averages, tuple):
            for f in averages:
                out = np.tensordot(out, f, axes=([1], [0]))
            return out
        axes = tuple(range(1, self.d + 1))
        return np.tensordot(out, averages, axes=(axes, tuple(range(self.d))))

    def wavelet_pairings(self, zeta, n, basis) -> WaveletPairings:
        p = int(round(np.log2(self.N)))
        mats = basis.matrices(zeta, n, p, self.T)
        out = self.masses.data
        for mat in mats:
            out = np.tensordot(out, mat.matrix, axes=([1], [1]))
        return WaveletPairings(out, tuple(m.k_lo for m in mats), tuple(m.level for m in mats))

    def rebuild(self, noise: "NoiseSample") -> "CellMeasure":
        if self._builder is not None:
            return self._builder(noise)
        if self.deterministic:
            return self
        return super().rebuild(noise)

    def scaled(self, c: float) -> "CellMeasure":
        builder = None if self._builder is None else (lambda nz, b=self._builder: b(nz).scaled(c))
        return CellMeasure(self.masses.with_data(c * self.masses.data), self.linear_in_noise, builder,
                           self.declared, self.label)


def white_noise_distribution(noise: "NoiseSample") -> CellMeasure:
    return CellMeasure(noise.field, linear_in_noise=True, builder=white_noise_distribution, label="xi")


def derivative_of(Z: GridField) -> CellMeasure:
    """The distribution d^d Z / dx_1...dx_d of a deterministic corner field as cell increments."""
    if not Z.deterministic:
        raise InvalidArgumentError("Derivative distributions are built from deterministic drivers")
    masses = GridField(Z.cell_increments(), Z.T, FieldKind.CELL_DENSITY, adapted=True, label=f"d{Z.label}")
    declared = None
    if Z.declared is not None:
        declared = DeclaredClass(tuple(a - 1.0 for a in Z.declared.alpha), Z.declared.delta, Z.declared.m)
    return CellMeasure(masses, declared=declared, label=masses.label)


def lebesgue_density(c: float, N: int, T: float, d: int) -> CellMeasure:
    h = T / N
    masses = GridField(np.full((1,) + (N,) * d, c * h ** d), T, FieldKind.CELL_DENSITY, label="density")
    return CellMeasure(masses, declared=DeclaredClass((0.0,) * d, (0.0,) * d, float("inf")), label="density")
