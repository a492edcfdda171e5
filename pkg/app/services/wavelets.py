"""
Compactly supported orthonormal wavelets on dyadic grids.

Filter taps come from PyWavelets; the scaling function is sampled by our own
cascade iteration starting from the unit box, so every iterate is piecewise
constant on the 2^-J grid and pairs exactly with piecewise-constant data.

Wavelets are scaled relative to the domain [0,T]^d:
    phi^n_y(z) = prod_i (2^n_i / T)^(1/2) phi((2^n_i / T)(z_i - y_i)),
with y on the lattice T 2^-n Z^d.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pywt

from ..config import settings
from ..exceptions import InvalidArgumentError, ResolutionError
from ..models.test_function import TestFunction
from .increments import IndexSet

logger = logging.getLogger(__name__)

_SQRT2 = np.sqrt(2.0)


def _parse_family(family: str) -> Tuple[str, int]:
    """Map a family name to (pywt name, vanishing-moment capability)."""
    name = family.strip().lower()
    if name in ("haar", "db1", "daubechies1"):
        return "haar", 1
    match = re.fullmatch(r"(?:db|daubechies)(\d+)", name)
    if match:
        order = int(match.group(1))
        if 2 <= order <= 10:
            return f"db{order}", order
    raise InvalidArgumentError(f"Unknown wavelet family '{family}' (expected haar or db2..db10)")


def _refine(samples: np.ndarray, taps: np.ndarray, level: int) -> np.ndarray:
    """One cascade step: level-i samples of phi to level-(i+1) samples of sum taps_k sqrt2 phi(2x-k)."""
    out = np.zeros(2 * samples.shape[0])
    stride = 1 << level
    for k, tap in enumerate(taps):
        start = k * stride
        out[start:start + samples.shape[0]] += _SQRT2 * tap * samples
    return out


@dataclass(frozen=True)
class CellMatrix:
    """
    Cell averages of all lattice translates of one 1-D wavelet on a 2^p grid.

    Row r stands for the translate k = k_lo + r; entry (r, c) is the mean of the
    scaled wavelet over cell c. Translates with any overlap with [0,T] are kept;
    fits[r] tells whether the whole support lies inside [0,T].
    """

    matrix: np.ndarray
    k_lo: int
    fits: np.ndarray
    level: int
    p: int

    @property
    def count(self) -> int:
        return self.matrix.shape[0]


class WaveletBasis1D:
    """
    One-dimensional scaling function and wavelet sampled at depth J, supported on [C, R].

    C is the integer shift and R = C + L - 1 for L filter taps. C = 0 is the boundary
    case: phi^n_y then starts at y itself, so a germ frozen at y still pairs only with
    noise cells at or after y. Negative shifts would reach behind the base point and
    are rejected.
    """

    def __init__(self, family: str, r: Optional[int] = None, depth: Optional[int] = None,
                 shift: Optional[int] = None, tolerance: Optional[float] = None):
        pywt_name, capability = _parse_family(family)
        r = capability if r is None else r
        if r < 0 or r > capability:
            raise InvalidArgumentError(
                f"Family {family} provides at most {capability} vanishing moments, requested {r}"
            )
        depth = settings.wavelet_depth if depth is None else depth
        if depth < 1:
            raise InvalidArgumentError(f"Cascade depth must be at least 1, got {depth}")
        tolerance = settings.cascade_tolerance if tolerance is None else tolerance
        shift = settings.support_shift if shift is None else int(shift)

        self._setup(pywt_name, r, depth, shift, pywt.Wavelet(pywt_name).rec_lo)
        self.phi, self.phi_hat = self._cascade(tolerance)
        self._finish()
        logger.debug(
            f"Built {self.family} basis: r={r}, J={depth}, cascade steps={len(self.cascade_increments)}, "
            f"replication residual={self.replication_residual:.3e}"
        )

    def _setup(self, family: str, r: int, depth: int, shift: int, taps: Sequence[float]) -> None:
        if shift < 0:
            raise InvalidArgumentError(f"Support shift must be non-negative, got {shift}")
        self.family = family
        self.vanishing_moments = r
        self.depth = depth
        self.shift = shift
        self.refinement_coeffs = np.asarray(taps, dtype=float)
        L = self.refinement_coeffs.shape[0]
        self.detail_coeffs = np.array(
            [(-1) ** k * self.refinement_coeffs[L - 1 - k] for k in range(L)], dtype=float
        )
        self.cascade_increments: List[float] = []

    def _finish(self) -> None:
        self.replication_residual = float(
            np.max(np.abs(_refine(self.phi, self.refinement_coeffs, self.depth) - np.repeat(self.phi, 2)))
        )
        self._matrices: Dict[Tuple[int, int, float, bool], CellMatrix] = {}
        self._lock = threading.Lock()

    def _cascade(self, tolerance: float) -> Tuple[np.ndarray, np.ndarray]:
        L = self.refinement_coeffs.shape[0]
        current = np.zeros(L - 1)
        current[0] = 1.0
        level = 0
        while level < self.depth - 1:
            nxt = _refine(current, self.refinement_coeffs, level)
            increment = float(np.max(np.abs(nxt - np.repeat(current, 2))))
            self.cascade_increments.append(increment)
            current, level = nxt, level + 1
            if increment < tolerance:
                current = np.repeat(current, 1 << (self.depth - 1 - level))
                level = self.depth - 1
                break
        phi = _refine(current, self.refinement_coeffs, level)
        phi_hat = _refine(current, self.detail_coeffs, level)
        return phi, phi_hat

    # metadata -----------------------------------------------------------------

    @property
    def length(self) -> int:
        return self.refinement_coeffs.shape[0]

    @property
    def support(self) -> Tuple[int, int]:
        return self.shift, self.shift + self.length - 1

    @property
    def width(self) -> int:
        return self.length - 1

    def samples(self, detail: bool = False) -> np.ndarray:
        return self.phi_hat if detail else self.phi

    def evaluate(self, x, detail: bool = False) -> np.ndarray:
        """Unscaled phi (or phi_hat) at arbitrary points, piecewise constant on the 2^-J grid."""
        samples = self.samples(detail)
        idx = np.floor((np.asarray(x, dtype=float) - self.shift) * (1 << self.depth)).astype(int)
        inside = (idx >= 0) & (idx < samples.shape[0])
        return np.where(inside, samples[np.clip(idx, 0, samples.shape[0] - 1)], 0.0)

    # checks -------------------------------------------------------------------

    def orthonormality_error(self) -> float:
        """max_k |<phi, phi(. - k)> - delta_{0,k}| over integer shifts."""
        stride = 1 << self.depth
        errors = []
        for k in range(self.length - 1):
            a = self.phi[k * stride:]
            b = self.phi[:self.phi.shape[0] - k * stride]
            errors.append(abs(float(np.dot(a, b)) / stride - (1.0 if k == 0 else 0.0)))
        return max(errors)

    def moment_residuals(self) -> np.ndarray:
        """Relative moments of phi_hat for m = 0..r-1, centred at the support midpoint."""
        n = self.phi_hat.shape[0]
        edges = np.arange(n + 1) / (1 << self.depth) - self.width / 2.0
        out = np.zeros(self.vanishing_moments)
        for m in range(self.vanishing_moments):
            weights = (edges[1:] ** (m + 1) - edges[:-1] ** (m + 1)) / (m + 1)
            scale = float(np.sum(np.abs(weights * self.phi_hat))) or 1.0
            out[m] = abs(float(np.dot(weights, self.phi_hat))) / scale
        return out

    # cell averages ------------------------------------------------------------

    def _block_means(self, detail: bool, q: int) -> np.ndarray:
        samples = self.samples(detail)
        if q >= self.depth:
            return np.repeat(samples, 1 << (q - self.depth))
        return samples.reshape(-1, 1 << (self.depth - q)).mean(axis=1)

    def cell_matrix(self, level: int, p: int, T: float, detail: bool = False) -> CellMatrix:
        """
        Cell averages of phi^level_{kT2^-level} on the 2^p grid over [0,T].

        Raises:
            ResolutionError: the wavelet level is finer than the grid
        """
        if level < 0:
            raise InvalidArgumentError(f"Negative wavelet level {level}")
        q = p - level
        if q < 0:
            raise ResolutionError(f"Wavelet level {level} is finer than the 2^{p} evaluation grid")
        key = (level, p, float(T), detail)
        cached = self._matrices.get(key)
        if cached is not None:
            return cached

        blocks = self._block_means(detail, q)
        nb = blocks.shape[0]
        s0, s1 = self.support
        ks = np.arange(-s1 + 1, (1 << level) - s0)
        cells = np.arange(1 << p)
        offset = cells[None, :] - ((ks + s0) << q)[:, None]
        valid = (offset >= 0) & (offset < nb)
        scale = np.sqrt((1 << level) / T)
        matrix = np.where(valid, blocks[np.clip(offset, 0, nb - 1)], 0.0) * scale
        fits = (ks + s0 >= 0) & (ks + s1 <= (1 << level))
        result = CellMatrix(matrix, int(ks[0]), fits, level, p)
        with self._lock:
            self._matrices.setdefault(key, result)
        return result

    # persistence --------------------------------------------------------------

    def header(self) -> dict:
        return {
            "family": self.family,
            "r": self.vanishing_moments,
            "J": self.depth,
            "support": list(self.support),
            "shift": self.shift,
            "taps": self.refinement_coeffs.tolist(),
            "samples": int(self.phi.shape[0]),
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.concatenate([self.phi, self.phi_hat]).astype("<f8").tofile(path)
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(self.header(), indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "WaveletBasis1D":
        """Restore a saved basis from its samples and taps without re-running the cascade."""
        path = Path(path)
        header = json.loads(path.with_suffix(path.suffix + ".json").read_text(encoding="utf-8"))
        family, capability = _parse_family(header["family"])
        if not 0 <= header["r"] <= capability:
            raise InvalidArgumentError(f"Header of {path} declares r={header['r']} for {family}")
        raw = np.fromfile(path, dtype="<f8")
        n = int(header["samples"])
        if raw.shape[0] != 2 * n:
            raise InvalidArgumentError(f"{path} holds {raw.shape[0]} values, header expects {2 * n}")
        basis = cls.__new__(cls)
        basis._setup(family, int(header["r"]), int(header["J"]), int(header["shift"]), header["taps"])
        basis.phi, basis.phi_hat = raw[:n].copy(), raw[n:].copy()
        basis._finish()
        logger.debug(f"Loaded {family} basis from {path}")
        return basis


def build_basis(family: Optional[str] = None, r: Optional[int] = None, depth: Optional[int] = None,
                shift: Optional[int] = None) -> WaveletBasis1D:
    return WaveletBasis1D(family or settings.wavelet_family, r, depth, shift)


@dataclass(frozen=True)
class LatticeCoefficients:
    """Pairings <phi_hat^{zeta,n}_y, psi> for all lattice translates y overlapping the domain."""

    values: np.ndarray
    k_lo: Tuple[int, ...]
    fits: Tuple[np.ndarray, ...]
    levels: Tuple[int, ...]
    T: float

    def points(self, axis: int) -> np.ndarray:
        k = self.k_lo[axis] + np.arange(self.values.shape[axis])
        return k * (self.T / (1 << self.levels[axis]))

    def overflow(self) -> bool:
        """True if a translate sticking out of the domain has a non-zero pairing."""
        mask = np.ones(self.values.shape, dtype=bool)
        for axis, fits in enumerate(self.fits):
            shape = [1] * self.values.ndim
            shape[axis] = -1
            mask = mask & fits.reshape(shape)
        return bool(np.any((self.values != 0.0) & ~mask))


class WaveletBasisD:
    def __init__(self, base: WaveletBasis1D, d: int):
        if d < 1 or d > settings.max_dimension:
            raise InvalidArgumentError(f"Dimension {d} outside 1..{settings.max_dimension}")
        self.base = base
        self.d = d

    def _levels(self, n) -> Tuple[int, ...]:
        levels = (int(n),) * self.d if np.isscalar(n) else tuple(int(v) for v in n)
        if len(levels) != self.d:
            raise InvalidArgumentError(f"Level {levels} has wrong dimension for d={self.d}")
        return levels

    def matrices(self, zeta: IndexSet, n, p: int, T: float) -> List[CellMatrix]:
        levels = self._levels(n)
        return [self.base.cell_matrix(levels[i], p, T, detail=(i + 1) in zeta) for i in range(self.d)]

    def coefficients(self, zeta: IndexSet, n, psi: TestFunction) -> LatticeCoefficients:
        mats = self.matrices(zeta, n, psi.level, psi.T)
        if psi.is_separable:
            values = np.ones(())
            for mat, f in zip(mats, psi.factors()):
                values = np.multiply.outer(values, (mat.matrix @ f) * psi.h)
        else:
            values = psi.values()
            for mat in mats:
                values = np.tensordot(values, mat.matrix, axes=([0], [1]))
            values = values * psi.h ** self.d
        return LatticeCoefficients(
            values,
            tuple(m.k_lo for m in mats),
            tuple(m.fits for m in mats),
            self._levels(n),
            psi.T,
        )

    def lattice_index(self, n, y: Sequence[float], T: float) -> Tuple[int, ...]:
        levels = self._levels(n)
        out = []
        for level, yi in zip(levels, y):
            k = yi * (1 << level) / T
            if abs(k - round(k)) > 1e-9:
                raise InvalidArgumentError(f"Point {tuple(y)} is not on the level-{levels} lattice")
            out.append(int(round(k)))
        return tuple(out)

    def inner_product(self, zeta: IndexSet, n, y: Sequence[float], psi: TestFunction) -> float:
        coeffs = self.coefficients(zeta, n, psi)
        k = self.lattice_index(n, y, psi.T)
        idx = tuple(ki - lo for ki, lo in zip(k, coeffs.k_lo))
        if any(i < 0 or i >= s for i, s in zip(idx, coeffs.values.shape)):
            return 0.0
        return float(coeffs.values[idx])

    def project(self, n, psi: TestFunction, zeta: Optional[IndexSet] = None) -> TestFunction:
        """Orthogonal projection onto the span of phi_hat^{zeta,n}_y (zeta empty gives P_n)."""
        zeta = IndexSet.empty(self.d) if zeta is None else zeta
        levels = self._levels(n)
        mats = self.matrices(zeta, levels, psi.level, psi.T)
        width = self.base.width
        support = tuple(
            (a - width * psi.T / (1 << lv), b + width * psi.T / (1 << lv))
            for (a, b), lv in zip(psi.support, levels)
        )
        if psi.is_separable:
            factors = [mat.matrix.T @ ((mat.matrix @ f) * psi.h) for mat, f in zip(mats, psi.factors())]
            profiles = tuple(_piecewise_profile(f, psi.T) for f in factors)
            return TestFunction(psi.T, self.d, psi.level, support, profiles=profiles, label=f"P{levels}{psi.label}")
        values = psi.values()
        for mat in mats:
            values = np.tensordot(values, (mat.matrix.T @ mat.matrix) * psi.h, axes=([0], [1]))
        projected = TestFunction.from_values(values, psi.T, label=f"P{levels}{psi.label}")
        return TestFunction(psi.T, self.d, psi.level, support, dense_profile=projected.dense_profile,
                            label=projected.label)

    def wavelet(self, zeta: IndexSet, n, y: Sequence[float], T: float, level: Optional[int] = None) -> TestFunction:
        """phi_hat^{zeta,n}_y as a separable test function."""
        levels = self._levels(n)
        k = self.lattice_index(levels, y, T)
        s0, s1 = self.base.support
        profiles = []
        support = []
        for i in range(self.d):
            scale = (1 << levels[i]) / T
            detail = (i + 1) in zeta
            profiles.append(
                lambda z, s=scale, kk=k[i], dt=detail: np.sqrt(s) * self.base.evaluate(s * np.asarray(z) - kk, dt)
            )
            support.append(((k[i] + s0) / scale, (k[i] + s1) / scale))
        return TestFunction.separable(profiles, T, tuple(support), level=level, label=f"phi{zeta}{levels}")


def _piecewise_profile(values: np.ndarray, T: float):
    cells = values.shape[0]
    h = T / cells
    frozen = values.copy()

    def profile(z):
        idx = np.floor(np.asarray(z, dtype=float) / h).astype(int)
        inside = (idx >= 0) & (idx < cells)
        return np.where(inside, frozen[np.clip(idx, 0, cells - 1)], 0.0)

    return profile


def rescale(psi: TestFunction, x: Sequence[float], lam) -> TestFunction:
    """
    psi^lambda_x(y) = prod_i lambda_i^-1 psi((y - x) / lambda).

    The result keeps the evaluation level of psi; callers check in_domain().
    """
    x = np.asarray(x, dtype=float)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), x.shape).copy()
    if np.any(lam <= 0):
        raise InvalidArgumentError(f"Scales must be strictly positive, got {lam}")
    support = tuple((x[i] + lam[i] * a, x[i] + lam[i] * b) for i, (a, b) in enumerate(psi.support))
    if psi.is_separable:
        profiles = tuple(
            (lambda z, p=p, xi=x[i], li=lam[i]: p((np.asarray(z) - xi) / li) / li)
            for i, p in enumerate(psi.profiles)
        )
        out = TestFunction(psi.T, psi.d, psi.level, support, profiles=profiles, smoothness=psi.smoothness,
                           label=psi.label)
    else:
        dense = psi.dense_profile
        norm = float(np.prod(lam))
        out = TestFunction(psi.T, psi.d, psi.level, support,
                           dense_profile=lambda pts: dense((np.asarray(pts) - x) / lam) / norm,
                           smoothness=psi.smoothness, label=psi.label)
    if not out.in_domain():
        logger.debug(f"Rescaled {psi.label} at x={x.tolist()}, lambda={lam.tolist()} leaves the domain")
    return out


def two_level_coefficients(basis: WaveletBasis1D, n: int, T: float, p: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    <phi^{n+1}_{z+k}, phi^n_z> and <phi^{n+1}_{z+k}, phi_hat^n_z> for the lattice point z of
    index 0 and k = 0..L-1 steps of the finer lattice.
    """
    coarse = basis.cell_matrix(n, p, T)
    coarse_hat = basis.cell_matrix(n, p, T, detail=True)
    fine = basis.cell_matrix(n + 1, p, T)
    h = T / (1 << p)
    row = -coarse.k_lo
    a = np.array([np.dot(fine.matrix[k - fine.k_lo], coarse.matrix[row]) * h for k in range(basis.length)])
    b = np.array([np.dot(fine.matrix[k - fine.k_lo], coarse_hat.matrix[row]) * h for k in range(basis.length)])
    return a, b
