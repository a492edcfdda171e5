"""
Multiparameter sewing of two-point germs over grid-like dyadic partitions, and its
bridge to wavelet reconstruction.

A two-point germ Xi maps ordered corner pairs s <= t to per-sample values. Sewing in
directions theta sums Xi over the cells of a partition of [s,t] that refines only the
theta axes.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from ..config import settings
from ..exceptions import InvalidArgumentError, SupportError, UnsupportedOperationError
from ..models.grid_field import FieldKind, GridField
from ..models.schemas import ConvergenceLog, RateFit
from ..models.test_function import TestFunction
from .holder import ConditioningContext, fit_rate, lm_norms, sample_grid_points
from .increments import IndexSet
from .noise import FiltrationMask, NoiseSample
from .reconstruction import _judge
from .wavelets import WaveletBasisD

logger = logging.getLogger(__name__)


class TwoPointGerm(ABC):
    T: float
    d: int
    M: int
    adapted: bool = True
    label: str = ""

    @abstractmethod
    def evaluate_many(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """Values for K ordered pairs (K, d), shape (M, K)."""

    def evaluate(self, s: Sequence[float], t: Sequence[float]) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        if np.any(s > t + 1e-12):
            raise InvalidArgumentError(f"Two-point germs need s <= t, got {s.tolist()} and {t.tolist()}")
        return self.evaluate_many(s[None, :], t[None, :])[:, 0]

    def rebuild(self, noise: NoiseSample) -> "TwoPointGerm":
        raise UnsupportedOperationError(f"{type(self).__name__} cannot be rebuilt on resampled noise")

    @property
    def grid(self) -> Optional[int]:
        return None


class AdditiveGerm(TwoPointGerm):
    """Xi_{s,t} = box^{[d]}_{s,t} A."""

    def __init__(self, A: GridField, builder: Optional[Callable[[NoiseSample], GridField]] = None):
        if A.kind != FieldKind.CORNER_VALUES:
            raise InvalidArgumentError("Additive germs are built from corner fields")
        self.A = A
        self.T, self.d, self.M = A.T, A.d, A.M
        self.adapted = A.adapted
        self.builder = builder
        self.label = f"box {A.label}"

    def evaluate_many(self, lo, hi):
        return self.A.rect_increments(tuple(range(self.d)), lo, hi)

    def rebuild(self, noise):
        if self.builder is None:
            return super().rebuild(noise)
        return AdditiveGerm(self.builder(noise), self.builder)

    @property
    def grid(self):
        return self.A.N


class ProductTwoPointGerm(TwoPointGerm):
    """Xi_{s,t} = Y_s box^{[d]}_{s,t} X."""

    def __init__(self, Y: GridField, X: GridField,
                 builder: Optional[Callable[[NoiseSample], tuple]] = None, label: str = ""):
        if not Y.same_grid(X) or Y.kind != FieldKind.CORNER_VALUES:
            raise InvalidArgumentError("Both factors must be corner fields on the same grid")
        self.Y, self.X = Y, X
        self.T, self.d, self.M = X.T, X.d, max(X.M, Y.M)
        self.adapted = X.adapted and Y.adapted
        self.builder = builder
        self.label = label or f"{Y.label}_s box {X.label}"

    def evaluate_many(self, lo, hi):
        return self.Y.at(lo) * self.X.rect_increments(tuple(range(self.d)), lo, hi)

    def rebuild(self, noise):
        if self.builder is None:
            return super().rebuild(noise)
        Y, X = self.builder(noise)
        return ProductTwoPointGerm(Y, X, self.builder, self.label)

    @property
    def grid(self):
        return self.X.N


class SquareGerm(TwoPointGerm):
    """Xi_{s,t} = (box^{[d]}_{s,t} Z)^2."""

    def __init__(self, Z: GridField):
        self.Z = Z
        self.T, self.d, self.M = Z.T, Z.d, Z.M
        self.label = f"(box {Z.label})^2"

    def evaluate_many(self, lo, hi):
        return self.Z.rect_increments(tuple(range(self.d)), lo, hi) ** 2

    @property
    def grid(self):
        return self.Z.N


class FunctionGerm(TwoPointGerm):
    """Deterministic germ from a vectorized function of (lo, hi) arrays."""

    def __init__(self, func: Callable[[np.ndarray, np.ndarray], np.ndarray], d: int, T: float = 1.0,
                 label: str = ""):
        self.func = func
        self.T, self.d, self.M = T, d, 1
        self.label = label or getattr(func, "__name__", "xi")

    def evaluate_many(self, lo, hi):
        return np.asarray(self.func(lo, hi), dtype=float).reshape(1, -1)


# delta operator -------------------------------------------------------------------------


def _replace(point: np.ndarray, axis: int, value: float) -> np.ndarray:
    out = point.copy()
    out[axis] = value
    return out


def delta_op(eta: IndexSet, u: Sequence[float], Xi: TwoPointGerm, s: Sequence[float],
             t: Sequence[float]) -> np.ndarray:
    """prod_{i in eta} delta^i_u Xi_{s,t} with delta^i_u Xi_{s,t} = Xi_{s,t} - Xi_{s, pi^i_u t} - Xi_{pi^i_u s, t}."""
    s, u, t = (np.asarray(v, dtype=float) for v in (s, u, t))
    if np.any(s > u + 1e-12) or np.any(u > t + 1e-12):
        raise InvalidArgumentError(f"delta operator needs s <= u <= t, got {s.tolist()}, {u.tolist()}, {t.tolist()}")

    def apply(axes: tuple, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if not axes:
            return Xi.evaluate(a, b)
        i, rest = axes[0], axes[1:]
        return apply(rest, a, b) - apply(rest, a, _replace(b, i, u[i])) - apply(rest, _replace(a, i, u[i]), b)

    return apply(eta.axes, s, t)


# Riemann sums ------------------------------------------------------------------------------


def partition_boxes(theta: IndexSet, s: np.ndarray, t: np.ndarray, counts: Sequence[int]):
    """Corners (K, d) of the grid-like partition of [s,t] with counts[i] pieces on theta axes."""
    d = s.shape[0]
    edges = []
    for i in range(d):
        if i in theta.axes:
            edges.append(np.linspace(s[i], t[i], int(counts[i]) + 1))
        else:
            edges.append(np.array([s[i], t[i]]))
    lo_axes = np.meshgrid(*[e[:-1] for e in edges], indexing="ij")
    hi_axes = np.meshgrid(*[e[1:] for e in edges], indexing="ij")
    lo = np.stack([a.ravel() for a in lo_axes], axis=1)
    hi = np.stack([a.ravel() for a in hi_axes], axis=1)
    return lo, hi


def riemann_sum(Xi: TwoPointGerm, theta: IndexSet, s: Sequence[float], t: Sequence[float],
                counts: Sequence[int]) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    lo, hi = partition_boxes(theta, s, t, counts)
    return Xi.evaluate_many(lo, hi).sum(axis=1)


def _grid_counts(Xi: TwoPointGerm, s: np.ndarray, t: np.ndarray) -> List[int]:
    if Xi.grid is None:
        raise InvalidArgumentError(f"{Xi.label} has no grid; pass explicit levels")
    h = Xi.T / Xi.grid
    return [max(1, int(round((b - a) / h))) for a, b in zip(s, t)]


def sew_on_grid(Xi: TwoPointGerm, theta: IndexSet, s: Sequence[float], t: Sequence[float]) -> np.ndarray:
    """I^theta Xi_{s,t} at the mesh of the germ's own grid."""
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    return riemann_sum(Xi, theta, s, t, _grid_counts(Xi, s, t))


@dataclass
class SewingResult:
    values: np.ndarray
    log: ConvergenceLog
    history: List[np.ndarray] = field(default_factory=list)

    def rows(self) -> List[dict]:
        rows = []
        for k, level in enumerate(self.log.levels):
            increment = self.log.increments[k - 1] if k >= 1 else float("nan")
            rows.append({"level": level, "mean": float(np.mean(self.history[k])), "cauchy_increment": increment})
        return rows


def sew(Xi: TwoPointGerm, theta: IndexSet, s: Sequence[float], t: Sequence[float],
        levels: Optional[Sequence[int]] = None, cauchy_tol: Optional[float] = None) -> SewingResult:
    """
    Riemann sums of Xi over dyadic refinements of the theta axes of [s,t].

    The default schedule runs from one piece per axis down to the germ's grid mesh.
    """
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(s > t):
        raise InvalidArgumentError(f"Sewing box corners not ordered: {s.tolist()} > {t.tolist()}")
    if levels is None:
        finest = min(_grid_counts(Xi, s, t)[i] for i in theta.axes) if theta else 1
        levels = range(0, int(np.log2(finest)) + 1)
    log = ConvergenceLog()
    history: List[np.ndarray] = []
    for k in levels:
        counts = [1 << k] * Xi.d
        current = riemann_sum(Xi, theta, s, t, counts)
        if history:
            norm, se = lm_norms((current - history[-1]).reshape(-1, 1), 2.0)
            log.increments.append(float(norm[0]))
            log.increment_se.append(float(se[0]))
        history.append(current)
        log.levels.append(int(k))
    _judge(log, settings.cauchy_tolerance if cauchy_tol is None else cauchy_tol)
    if log.diverged:
        logger.warning(f"Sewing of {Xi.label} in directions {theta} did not converge: {log.increments}")
    return SewingResult(history[-1], log, history)


def additivity_defect(Xi: TwoPointGerm, theta: IndexSet, s, u, t) -> float:
    """max over i in theta of |delta^i_u I^theta Xi_{s,t}| at the grid mesh."""
    s, u, t = (np.asarray(v, dtype=float) for v in (s, u, t))
    worst = 0.0
    for i in theta.axes:
        whole = sew_on_grid(Xi, theta, s, t)
        left = sew_on_grid(Xi, theta, s, _replace(t, i, u[i]))
        right = sew_on_grid(Xi, theta, _replace(s, i, u[i]), t)
        worst = max(worst, float(np.max(np.abs(whole - left - right))))
    return worst


# bridge to reconstruction -----------------------------------------------------------------


def _derivative_germ_values(Xi: TwoPointGerm, theta: IndexSet, x: np.ndarray, n: int,
                            coeffs: np.ndarray, k_lo: Sequence[int]) -> np.ndarray:
    """sum_y F_{pi^theta_y x}(phi^n_y) <phi^n_y, psi> with F_b = d^{[d]} Xi_{b, .} and Haar phi."""
    d = Xi.d
    hn = Xi.T / (1 << n)
    nonzero = np.argwhere(coeffs != 0.0)
    if nonzero.size == 0:
        return np.zeros(Xi.M)
    y = (nonzero + np.asarray(k_lo)) * hn
    base = np.where(np.isin(np.arange(d), theta.axes), y, x)
    total = np.zeros((Xi.M, len(y)))
    for mask in range(1 << d):
        corner = y.copy()
        flipped = 0
        for i in range(d):
            if mask >> i & 1:
                corner[:, i] += hn
                flipped += 1
        sign = -1.0 if (d - flipped) % 2 else 1.0
        total += sign * Xi.evaluate_many(base, corner)
    weights = coeffs[tuple(nonzero.T)] * hn ** (-d / 2.0)
    return total @ weights


def _sewn_pairing(Xi: TwoPointGerm, theta: IndexSet, x: np.ndarray, psi: TestFunction) -> np.ndarray:
    """<d^{[d]} I^theta Xi_{x,.}, psi> by summation by parts against the cell averages of psi."""
    N = Xi.grid
    d = Xi.d
    h = Xi.T / N
    start = [int(round(v / h)) for v in x]
    sizes = [N - a for a in start]
    # corner values z -> I^theta Xi_{x,z} on [x, T], built by cumulative sums along theta
    axes = []
    for i in range(d):
        if i in theta.axes:
            axes.append(np.arange(sizes[i]))
        else:
            axes.append(np.arange(sizes[i] + 1))
    mesh = np.meshgrid(*axes, indexing="ij")
    index = np.stack([m.ravel() for m in mesh], axis=1)
    lo = np.empty(index.shape)
    hi = np.empty(index.shape)
    for i in range(d):
        if i in theta.axes:
            lo[:, i] = (start[i] + index[:, i]) * h
            hi[:, i] = lo[:, i] + h
        else:
            lo[:, i] = x[i]
            hi[:, i] = (start[i] + index[:, i]) * h
    pieces = Xi.evaluate_many(lo, hi).reshape((Xi.M,) + mesh[0].shape)
    corners = pieces
    for i in theta.axes:
        corners = np.cumsum(corners, axis=i + 1)
        pad = [(0, 0)] * (d + 1)
        pad[i + 1] = (1, 0)
        corners = np.pad(corners, pad)
    cells = corners
    for axis in range(1, d + 1):
        cells = np.diff(cells, axis=axis)
    p = int(round(np.log2(N)))
    averages = psi.cell_averages(p)
    if isinstance(averages, tuple):
        weights = np.ones(())
        for a in averages:
            weights = np.multiply.outer(weights, a)
    else:
        weights = averages
    weights = weights[tuple(slice(a, None) for a in start)]
    return np.tensordot(cells, weights, axes=(tuple(range(1, d + 1)), tuple(range(d))))


def sewing_reconstruction_bridge(Xi: TwoPointGerm, basis: WaveletBasisD, x: Sequence[float],
                                 psi: TestFunction, theta: Optional[IndexSet] = None,
                                 n: Optional[int] = None) -> Dict[str, object]:
    """
    Compare R^theta_x of the germ d^{[d]} Xi_{x,.} with <d^{[d]} I^theta Xi_{x,.}, psi>.

    Both derivatives are realized on the grid by summation by parts; the wavelet side
    uses Haar functions, for which the germ pairing is a corner sum of Xi.
    """
    if basis.base.family != "haar":
        raise UnsupportedOperationError("The sewing bridge is realized with Haar wavelets")
    if Xi.grid is None:
        raise InvalidArgumentError("The sewing bridge needs a germ on a grid")
    d = Xi.d
    theta = IndexSet.full(d) if theta is None else theta
    x = np.asarray(x, dtype=float)
    N = Xi.grid
    n = int(round(np.log2(N))) if n is None else n
    if n > int(round(np.log2(N))):
        raise InvalidArgumentError(f"Level {n} is finer than the grid N={N}")
    for (lo, _), xi in zip(psi.support, x):
        if lo < xi - 1e-12:
            raise SupportError(f"Test function support must lie to the right of x={x.tolist()}")
    hn = Xi.T / (1 << n)
    if np.any(np.abs(x / hn - np.round(x / hn)) > 1e-9):
        raise InvalidArgumentError(f"Base point {x.tolist()} is not on the level-{n} grid")

    coeffs = basis.coefficients(IndexSet.empty(d), n, psi)
    if coeffs.overflow():
        raise SupportError(f"Wavelets at level {n} touching {psi.label or 'psi'} leave the domain")
    reconstructed = _derivative_germ_values(Xi, theta, x, n, coeffs.values, coeffs.k_lo)
    sewn = _sewn_pairing(Xi, theta, x, psi)

    diff = reconstructed - sewn
    scale = np.maximum(np.abs(sewn), 1e-300)
    relative_l2 = float(np.sqrt(np.mean(diff ** 2)) / max(np.sqrt(np.mean(sewn ** 2)), 1e-300))
    return {
        "reconstructed": reconstructed,
        "sewn": sewn,
        "relative_l2": relative_l2,
        "max_relative": float(np.max(np.abs(diff) / scale)),
        "level": n,
    }


# scaling ---------------------------------------------------------------------------------


def _alternating_sum(Xi: TwoPointGerm, theta: IndexSet, s: np.ndarray, t: np.ndarray) -> np.ndarray:
    total = None
    for sub in theta.subsets():
        sign = -1.0 if len(sub) % 2 else 1.0
        value = sign * (Xi.evaluate(s, t) if not sub else sew_on_grid(Xi, sub, s, t))
        total = value if total is None else total + value
    return total


def scaling_report(Xi: TwoPointGerm, theta: IndexSet, eta: Optional[IndexSet] = None,
                   predicted: Optional[float] = None, m: float = 2.0, points: int = 8, seed: int = 0,
                   context: Optional[ConditioningContext] = None, tolerance: float = 0.1,
                   scales: Optional[Sequence[float]] = None) -> Dict[str, object]:
    """
    lambda-fit of ||E^eta_s sum_{sub in theta} (-1)^{#sub} I^sub Xi_{s, s + lambda}||_m.

    Conditioned sums need a context whose rebuild returns the germ on resampled noise.
    """
    d = Xi.d
    eta = IndexSet.empty(d) if eta is None else eta
    if eta and context is None:
        raise UnsupportedOperationError("Conditioned scaling needs a conditioning context")
    N = Xi.grid
    if N is None:
        raise InvalidArgumentError("Scaling reports need a germ on a grid")
    if scales is None:
        scales = [Xi.T / (1 << k) for k in range(2, int(round(np.log2(N))) - 1)]
    bases = sample_grid_points(N, Xi.T, d, points, seed, high=Xi.T - max(scales))
    sizes = []
    for lam in scales:
        norms = []
        for s in bases:
            t = s + lam
            if eta:
                mask = FiltrationMask.of(eta, s)
                values = context.expect(
                    lambda nz, s=s, t=t: _alternating_sum(context.rebuilt(Xi, nz), theta, s, t), mask)
            else:
                values = _alternating_sum(Xi, theta, s, t)
            norms.append(float(lm_norms(np.asarray(values).reshape(-1, 1), m)[0][0]))
        sizes.append(float(np.mean(norms)))
    try:
        fit: Optional[RateFit] = fit_rate(scales, sizes)
    except InvalidArgumentError:
        fit = None
    passed = None
    if predicted is not None and fit is not None:
        passed = abs(fit.slope - predicted) <= tolerance
    return {"theta": list(theta.members), "eta": list(eta.members), "fit": fit, "predicted": predicted,
            "passed": passed, "sizes": sizes, "scales": list(scales)}


def delta_scaling_fit(Xi: TwoPointGerm, eta: IndexSet, m: float = 2.0, points: int = 8, seed: int = 0,
                      scales: Optional[Sequence[float]] = None) -> Optional[RateFit]:
    """lambda-fit of ||delta^eta_u Xi_{s, s+lambda}||_m with u the midpoint."""
    N = Xi.grid
    if scales is None:
        scales = [Xi.T / (1 << k) for k in range(2, int(round(np.log2(N))) - 1)]
    bases = sample_grid_points(N, Xi.T, Xi.d, points, seed, high=Xi.T - max(scales))
    sizes = []
    for lam in scales:
        norms = [float(lm_norms(delta_op(eta, s + lam / 2, Xi, s, s + lam).reshape(-1, 1), m)[0][0])
                 for s in bases]
        sizes.append(float(np.mean(norms)))
    try:
        return fit_rate(scales, sizes)
    except InvalidArgumentError:
        return None
