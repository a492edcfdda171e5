"""
Operations on stochastic Holder fields and distributions: composition, products,
Young and Ito/Walsh germs, interior primitives and full primitives.

Declared regularity classes are bookkeeping only; they drive the hypothesis checks
of the product constructions and are never enforced on the data.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from ..config import settings
from ..exceptions import (
    ConsistencyError,
    HypothesisViolationError,
    InvalidArgumentError,
    NotAdaptedError,
    SupportError,
    UnsupportedOperationError,
)
from ..models.distributions import CellMeasure, RandomDistribution, white_noise_distribution
from ..models.germs import CoherenceClass, DistributionGerm, Germ, ProductGerm
from ..models.grid_field import DeclaredClass, FieldKind, GridField
from ..models.schemas import ConvergenceLog
from ..models.test_function import TestFunction
from .holder import lm_norms, sample_grid_points
from .increments import IndexSet
from .noise import DriverKind, FiltrationMask, NoiseSample, conditional_expectation, variance_with_se
from .reconstruction import partial_sum, reconstruct
from .wavelets import WaveletBasisD

logger = logging.getLogger(__name__)

FieldBuilder = Callable[[NoiseSample], GridField]


def _declared_or(field_: GridField, d: int, alpha=None, delta=None, m=None) -> DeclaredClass:
    base = field_.declared or DeclaredClass((0.0,) * d, (0.0,) * d, 2.0)
    a = base.alpha if alpha is None else tuple(np.broadcast_to(np.asarray(alpha, dtype=float), (d,)))
    dl = base.delta if delta is None else tuple(np.broadcast_to(np.asarray(delta, dtype=float), (d,)))
    return DeclaredClass(tuple(float(v) for v in a), tuple(float(v) for v in dl), base.m if m is None else m)


# pointwise operations ----------------------------------------------------------------


def compose(g: Callable[[np.ndarray], np.ndarray], u: GridField, epsilon: float = 1.0) -> GridField:
    """g(u) pointwise; the declared class drops to C^{alpha eps / d} L_m."""
    if not 0 < epsilon <= 1:
        raise InvalidArgumentError(f"Holder exponent of g must lie in (0, 1], got {epsilon}")
    declared = None
    if u.declared is not None:
        declared = DeclaredClass(tuple(a * epsilon / u.d for a in u.declared.alpha), (0.0,) * u.d, u.declared.m)
    return u.with_data(np.asarray(g(u.data), dtype=float), declared=declared, label=f"g({u.label})")


def scalar_multiply(f: GridField, u: GridField) -> GridField:
    """Pointwise product; 1/k = 1/m + 1/n for the declared moment order."""
    if not f.same_grid(u):
        raise InvalidArgumentError("Scalar multiplication needs fields on the same grid")
    if f.M != u.M and 1 not in (f.M, u.M):
        raise InvalidArgumentError(f"Sample counts {f.M} and {u.M} do not broadcast")
    declared = None
    if f.declared is not None and u.declared is not None:
        if any(dl > a for dl, a in zip(u.declared.delta, u.declared.alpha)):
            logger.warning("Product hypothesis delta <= alpha does not hold for the declared class")
        inv = 1.0 / f.declared.m + 1.0 / u.declared.m
        k = float("inf") if inv == 0 else 1.0 / inv
        declared = DeclaredClass(
            tuple(min(a, b) for a, b in zip(f.declared.alpha, u.declared.alpha)),
            tuple(min(a, b) for a, b in zip(f.declared.delta, u.declared.delta)),
            k,
        )
    data = f.data * u.data
    return GridField(data, u.T, FieldKind.CORNER_VALUES, seed=u.seed if u.M >= f.M else f.seed,
                     adapted=f.adapted and u.adapted, declared=declared, label=f"{f.label}*{u.label}")


# product germs --------------------------------------------------------------------------


def young_product(u: GridField, zeta: RandomDistribution, alpha=None, beta=None, delta=None,
                  override: bool = False, u_builder: Optional[FieldBuilder] = None) -> ProductGerm:
    """
    Germ (u . zeta)_x = u(x) zeta with a deterministic distribution zeta in C^beta.

    Raises:
        HypothesisViolationError: alpha + beta <= -1/2 or alpha + beta + delta <= 0 on some axis
    """
    d = u.d
    cls = _declared_or(u, d, alpha, delta)
    if beta is None:
        if zeta.declared is None:
            raise InvalidArgumentError("Regularity of zeta is neither declared nor given")
        beta = zeta.declared.alpha
    beta = tuple(float(b) for b in np.broadcast_to(np.asarray(beta, dtype=float), (d,)))
    bad = [i + 1 for i in range(d)
           if not (cls.alpha[i] + beta[i] > -0.5 and cls.alpha[i] + beta[i] + cls.delta[i] > 0)]
    if bad:
        message = f"Young product hypotheses fail on axes {bad}: alpha={cls.alpha}, beta={beta}, delta={cls.delta}"
        if not override:
            raise HypothesisViolationError(message)
        logger.warning(f"{message} (overridden)")
    declared = CoherenceClass(beta, tuple(a + b for a, b in zip(cls.alpha, beta)), cls.delta)
    return ProductGerm(u, zeta, field_builder=u_builder, declared=declared, label=f"{u.label}*{zeta.label}")


def smooth_young_integral(kind: DriverKind | str, T: float, d: int) -> float:
    """
    Exact value of the integral of (1 + prod_i x_i) against the mixed derivative of a smooth driver over [0,T]^d.

    Raises:
        UnsupportedOperationError: the driver has no closed form (frozen_fbm_sheet)
    """
    kind = DriverKind(kind)
    if kind == DriverKind.SMOOTH_POLY:
        return float(T ** d + (T * T / 2.0) ** d)
    if kind == DriverKind.TRIG:
        # the constant part integrates sin' over a full half period to 0
        return float((-2.0 * T / np.pi) ** d)
    raise UnsupportedOperationError(f"No closed-form Young integral for driver {kind.value}")


def ito_product(u: GridField, noise: NoiseSample, alpha=None, u_builder: Optional[FieldBuilder] = None) -> ProductGerm:
    """Germ (u . xi)_x = u(x) xi for a field adapted to the noise filtration."""
    if not u.adapted:
        raise NotAdaptedError(f"Field {u.label or '<unnamed>'} is not adapted to the noise filtration")
    d = u.d
    cls = _declared_or(u, d, alpha)
    declared = CoherenceClass((-0.5,) * d, tuple(a - 0.5 for a in cls.alpha), (float("inf"),) * d)
    return ProductGerm(u, white_noise_distribution(noise), field_builder=u_builder, declared=declared,
                       label=f"{u.label}*xi")


# primitives ---------------------------------------------------------------------------


@dataclass
class IntegralResult:
    values: np.ndarray
    log: ConvergenceLog


def _check_alpha(f: RandomDistribution) -> None:
    if f.declared is not None and any(a <= -1 for a in f.declared.alpha):
        raise HypothesisViolationError(f"Primitives need alpha > -1, declared {f.declared.alpha}")


def interior_primitive(f: RandomDistribution, s: Sequence[float], t: Sequence[float], basis: WaveletBasisD,
                       n_max: Optional[int] = None, epsilon: Optional[float] = None) -> IntegralResult:
    """
    lim_n f(P_n 1_{(s,t]}) for a box kept an epsilon-margin away from the boundary.

    Raises:
        SupportError: s - eps|t-s| or t + eps|t-s| leaves [0,T]^d
    """
    epsilon = settings.primitive_margin if epsilon is None else epsilon
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(s > t):
        raise InvalidArgumentError(f"Box corners not ordered: {s.tolist()} > {t.tolist()}")
    width = t - s
    if np.any(s - epsilon * width < -1e-12) or np.any(t + epsilon * width > f.T + 1e-12) or np.any(s <= 0) \
            or np.any(t >= f.T):
        raise SupportError(f"Box ({s.tolist()}, {t.tolist()}] violates the {epsilon}-margin of [0,{f.T}]^{f.d}")
    _check_alpha(f)
    psi = TestFunction.indicator(s, t, f.T)
    result = reconstruct(DistributionGerm(f), IndexSet.empty(f.d), s, psi, basis, n_max)
    return IntegralResult(result.values, result.log)


def left_point_sum(Y: GridField, masses: np.ndarray, psi: Optional[TestFunction] = None) -> np.ndarray:
    """sum over cells of psi_bar(c) Y(lower-left corner of c) mass(c)."""
    weights = Y.lower_left() * masses
    if psi is None:
        return weights.reshape(weights.shape[0], -1).sum(axis=1)
    p = int(round(np.log2(Y.N)))
    averages = psi.cell_averages(p)
    out = weights
    if isinstance(averages, tuple):
        for a in averages:
            out = np.tensordot(out, a, axes=([1], [0]))
        return out
    return np.tensordot(out, averages, axes=(tuple(range(1, Y.d + 1)), tuple(range(Y.d))))


def walsh_sum(Y: GridField, noise: NoiseSample, psi: Optional[TestFunction] = None) -> np.ndarray:
    """Left-point Walsh grid integral of psi Y against the noise."""
    return left_point_sum(Y, noise.data, psi)


def germ_primitive(F: Germ, basis: WaveletBasisD, N: int) -> GridField:
    """
    Corner field t -> R(F)(1_{(0,t]}) on the N-grid.

    With Haar wavelets at the grid level every cell is one wavelet, so the primitive
    is the cumulative sum of F_c(phi_c) <phi_c, 1_c>.
    """
    if basis.base.family != "haar":
        if N > 64:
            raise UnsupportedOperationError("Corner-by-corner reconstruction is limited to N <= 64")
        return _slow_germ_primitive(F, basis, N)
    n = int(round(np.log2(N)))
    evals = F.wavelet_evaluations(IndexSet.full(F.d), np.zeros(F.d), n, basis)
    if evals.values.shape[1:] != (N,) * F.d:
        raise InvalidArgumentError(f"Germ lattice {evals.values.shape[1:]} does not match the {N}-grid")
    cells = evals.values * (F.T / N) ** (F.d / 2.0)
    masses = GridField(cells, F.T, FieldKind.CELL_DENSITY, adapted=F.adapted)
    return masses.cumulative(label=f"int {F.label}")


def _slow_germ_primitive(F: Germ, basis: WaveletBasisD, N: int) -> GridField:
    n = int(round(np.log2(N)))
    h = F.T / N
    out = np.zeros((F.M,) + (N + 1,) * F.d)
    for index in np.ndindex(*((N + 1,) * F.d)):
        if 0 in index:
            continue
        t = np.asarray(index, dtype=float) * h
        psi = TestFunction.indicator(np.zeros(F.d), t, F.T)
        out[(slice(None),) + index] = partial_sum(F, IndexSet.full(F.d), t, psi, n, basis)
    return GridField(out, F.T, FieldKind.CORNER_VALUES, adapted=F.adapted, label=f"int {F.label}")


@dataclass
class Primitive:
    field: GridField
    source: str
    crosscheck_error: Optional[float] = None
    notes: List[str] = field(default_factory=list)

    def two_point(self, x: Sequence[float], y: Sequence[float]) -> np.ndarray:
        return self.field.rect_increments(tuple(range(self.field.d)), np.atleast_2d(x), np.atleast_2d(y))[:, 0]


def _dyadic_pieces(t_index: int) -> List[tuple]:
    """Split (0, t] into (t/2^{k+1}, t/2^k] pieces down to a tail, in grid indices."""
    pieces = []
    hi = t_index
    while hi % 2 == 0 and hi >= 2:
        pieces.append((hi // 2, hi))
        hi //= 2
    pieces.append((0, hi))
    return pieces


def primitive(f: RandomDistribution, basis: WaveletBasisD, n_max: Optional[int] = None,
              seed: int = 0) -> Primitive:
    """
    Primitive Y of f: Y = 0 on the faces through 0 and box^{[d]}_{x,y} Y = f(1_{(x,y]}).

    Cell measures take the exact cumulative-sum path; with Haar wavelets a few corners
    are recomputed through wavelet projections of dyadic boxes as a cross-check.
    """
    if not isinstance(f, CellMeasure):
        raise UnsupportedOperationError("Primitives are built for cell measures")
    _check_alpha(f)
    declared = None
    if f.declared is not None:
        declared = DeclaredClass(tuple(a + 1.0 for a in f.declared.alpha), f.declared.delta, f.declared.m)
    Y = f.masses.cumulative(declared=declared, label=f"int {f.label}")
    result = Primitive(Y, f.label)
    if basis.base.family != "haar":
        result.notes.append("wavelet cross-check skipped for non-Haar basis")
        return result

    N, d, h = f.N, f.d, f.masses.h
    n = int(round(np.log2(N))) if n_max is None else n_max
    corners = sample_grid_points(N, f.T, d, settings.primitive_crosscheck_points, seed, low=h)
    worst = 0.0
    germ = DistributionGerm(f)
    for corner in corners:
        index = [int(round(c / h)) for c in corner]
        pieces = [_dyadic_pieces(k) for k in index]
        total = np.zeros(f.M)
        for combo in np.ndindex(*[len(p) for p in pieces]):
            lo = np.array([pieces[i][j][0] for i, j in enumerate(combo)]) * h
            hi = np.array([pieces[i][j][1] for i, j in enumerate(combo)]) * h
            psi = TestFunction.indicator(lo, hi, f.T)
            total += partial_sum(germ, IndexSet.empty(d), lo, psi, n, basis)
        fast = Y.at(corner)
        worst = max(worst, float(np.max(np.abs(total - fast))))
    result.crosscheck_error = worst
    scale = max(1.0, float(np.max(np.abs(Y.data))))
    if worst > settings.consistency_tolerance * scale:
        raise ConsistencyError(f"Primitive fast path and wavelet path disagree by {worst:.3e}")
    logger.debug(f"Primitive of {f.label}: cross-check error {worst:.3e}")
    return result


def additivity_residual(f: RandomDistribution, s, t, u, basis: WaveletBasisD, n_max: Optional[int] = None) -> float:
    """Max per-sample gap between the interior primitive of (s,t] and the sum over its 2^d pieces split at u."""
    s, t, u = (np.asarray(v, dtype=float) for v in (s, t, u))
    whole = interior_primitive(f, s, t, basis, n_max, epsilon=0.0).values
    parts = np.zeros_like(whole)
    d = f.d
    for mask in range(1 << d):
        lo = np.where([(mask >> i) & 1 for i in range(d)], u, s)
        hi = np.where([(mask >> i) & 1 for i in range(d)], t, u)
        parts += interior_primitive(f, lo, hi, basis, n_max, epsilon=0.0).values
    return float(np.max(np.abs(whole - parts)))


# Walsh reconstruction diagnostics ------------------------------------------------------


def ito_reconstruction_report(u: GridField, noise: NoiseSample, basis: WaveletBasisD,
                              u_builder: Optional[FieldBuilder] = None, psi: Optional[TestFunction] = None,
                              resamples: Optional[int] = None) -> Dict[str, float]:
    """
    Isometry and conditional-mean diagnostics of R(u . xi)(psi).

    The conditional check uses psi supported to the right of x in every direction,
    where E^i_x R(u . xi)(psi) must vanish.
    """
    d, T = u.d, u.T
    psi = psi or TestFunction.indicator([T / 2] * d, [3 * T / 4] * d, T)
    germ = ito_product(u, noise, u_builder=u_builder)
    n = int(round(np.log2(noise.N)))
    values = partial_sum(germ, IndexSet.full(d), np.zeros(d), psi, n, basis)
    var, var_se = variance_with_se(values)

    p = n
    weights = psi.cell_averages(p)
    if isinstance(weights, tuple):
        w = np.ones(())
        for a in weights:
            w = np.multiply.outer(w, a)
    else:
        w = weights
    isometry = float(np.mean((u.lower_left() ** 2) * w ** 2, axis=0).sum() * (T / noise.N) ** d)

    report = {"variance": var, "variance_se": var_se, "isometry": isometry, "sup_lm_norm": 0.0}
    report["sup_lm_norm"] = float(lm_norms(u.lower_left().reshape(u.M, -1), 2.0)[0].max())
    report["bound"] = report["sup_lm_norm"] * psi.l2_norm()

    x = np.array([s for s, _ in psi.support])
    linear = u_builder is None and u.deterministic
    rebuild = lambda nz: ito_product(u_builder(nz) if u_builder else u, nz)
    for i in range(d):
        mask = FiltrationMask.of(IndexSet.of([i + 1], d), x)
        cond = conditional_expectation(
            lambda nz: partial_sum(rebuild(nz), IndexSet.full(d), np.zeros(d), psi, n, basis),
            mask, noise, resamples, linear,
        )
        norm, se = lm_norms(cond.reshape(-1, 1), 2.0)
        report[f"conditional_axis_{i + 1}"] = float(norm[0])
        report[f"conditional_axis_{i + 1}_se"] = float(se[0])
    return report


def lipschitz_stability_check(g: Callable[[np.ndarray], np.ndarray], lipschitz: float, u: GridField, v: GridField,
                              noise: NoiseSample, basis: WaveletBasisD,
                              psi: Optional[TestFunction] = None) -> Dict[str, float]:
    """||R(g(u) xi)(psi) - R(g(v) xi)(psi)||_2 against Lip(g) sup_x ||u - v||_2 ||psi||_2."""
    if not u.same_grid(v):
        raise InvalidArgumentError("Fields compared for stability must share the grid")
    d, T = u.d, u.T
    psi = psi or TestFunction.indicator([0.0] * d, [T] * d, T)
    n = int(round(np.log2(noise.N)))
    ru = partial_sum(ito_product(compose(g, u), noise), IndexSet.full(d), np.zeros(d), psi, n, basis)
    rv = partial_sum(ito_product(compose(g, v), noise), IndexSet.full(d), np.zeros(d), psi, n, basis)
    lhs, lhs_se = lm_norms((ru - rv).reshape(-1, 1), 2.0)
    sup_diff = float(lm_norms((u.data - v.data).reshape(max(u.M, v.M), -1), 2.0)[0].max())
    rhs = lipschitz * sup_diff * psi.l2_norm()
    return {"lhs": float(lhs[0]), "lhs_se": float(lhs_se[0]), "rhs": rhs,
            "passed": float(lhs[0] - 3.0 * lhs_se[0] <= rhs)}
