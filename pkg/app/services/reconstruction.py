"""
Wavelet partial reconstructions R^{theta,n}_x(psi) of germs and their limits.

    R^{theta,n}_x(psi) = sum_{y in lattice_n} F_{pi^theta_y x}(phi^n_y) <phi^n_y, psi>

Germs hand back their evaluations on every lattice translate at once, so one level
of the sum is a single tensor contraction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..config import settings
from ..exceptions import ConsistencyError, InvalidArgumentError, SupportError, UnsupportedOperationError
from ..models.germs import CoherenceClass, Germ, ProductGerm, incoherent_field
from ..models.distributions import white_noise_distribution
from ..models.schemas import CharacterizationReport, ConvergenceLog
from ..models.test_function import TestFunction
from .holder import _grid_size, fit_rate, lm_norms, sample_grid_points
from .increments import IndexSet, rect_increment
from .noise import FiltrationMask, NoiseSample
from .wavelets import LatticeCoefficients, WaveletBasisD, rescale

logger = logging.getLogger(__name__)


def _contract(values: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    d = coeffs.ndim
    if values.shape[1:] != coeffs.shape:
        raise InvalidArgumentError(f"Lattice mismatch: germ {values.shape[1:]} vs test function {coeffs.shape}")
    return np.tensordot(values, coeffs, axes=(tuple(range(1, d + 1)), tuple(range(d))))


def _checked_coefficients(basis: WaveletBasisD, n, psi: TestFunction) -> LatticeCoefficients:
    coeffs = basis.coefficients(IndexSet.empty(basis.d), n, psi)
    if coeffs.overflow():
        raise SupportError(f"Wavelets at level {n} touching {psi.label or 'the test function'} leave the domain")
    return coeffs


def partial_sum(F: Germ, theta: IndexSet, x: Sequence[float], psi: TestFunction, n,
                basis: WaveletBasisD) -> np.ndarray:
    """R^{theta,n}_x(psi) per sample, shape (M,)."""
    coeffs = _checked_coefficients(basis, n, psi)
    evals = F.cached_evaluations(theta, x, n, basis)
    if tuple(evals.k_lo) != tuple(coeffs.k_lo):
        raise InvalidArgumentError("Germ and test function use different lattice offsets")
    return _contract(evals.values, coeffs.values)


def minimal_level(basis: WaveletBasisD, psi: TestFunction, n_max: int) -> int:
    """Smallest isotropic level at which every wavelet touching psi lies in the domain."""
    for k in range(0, n_max + 1):
        if not basis.coefficients(IndexSet.empty(basis.d), k, psi).overflow():
            return k
    raise SupportError(f"No level up to {n_max} keeps the wavelets touching {psi.label} inside the domain")


def _judge(log: ConvergenceLog, tol: float) -> None:
    if not log.increments:
        log.converged = True
        return
    if log.increments[-1] < tol:
        log.converged = True
        return
    try:
        log.fit = fit_rate([2.0 ** k for k in log.levels[1:]], log.increments)
    except InvalidArgumentError:
        log.fit = None
    log.converged = bool(
        log.fit is not None and log.fit.slope < -settings.min_decay_slope and log.fit.r2 > settings.min_decay_r2
    )
    log.diverged = not log.converged


@dataclass
class ReconstructionResult:
    values: np.ndarray
    log: ConvergenceLog
    history: List[np.ndarray] = field(default_factory=list)


def reconstruct(F: Germ, theta: IndexSet, x: Sequence[float], psi: TestFunction, basis: WaveletBasisD,
                n_max: Optional[int] = None, cauchy_tol: Optional[float] = None,
                n_min: Optional[int] = None) -> ReconstructionResult:
    """
    Iterate partial sums over isotropic levels and monitor the Cauchy increments.

    Convergence is declared when the last increment is below cauchy_tol or the
    increments decay with a fitted negative slope of sufficient quality.
    """
    tol = settings.cauchy_tolerance if cauchy_tol is None else cauchy_tol
    n_max = n_max if n_max is not None else int(round(np.log2(_grid_size(F))))
    n_min = minimal_level(basis, psi, n_max) if n_min is None else n_min
    if n_min > n_max:
        raise InvalidArgumentError(f"Level range {n_min}..{n_max} is empty")

    log = ConvergenceLog()
    history: List[np.ndarray] = []
    previous = None
    for k in range(n_min, n_max + 1):
        current = partial_sum(F, theta, x, psi, k, basis)
        history.append(current)
        log.levels.append(k)
        if previous is not None:
            norm, se = lm_norms((current - previous).reshape(-1, 1), 2.0)
            log.increments.append(float(norm[0]))
            log.increment_se.append(float(se[0]))
            logger.debug(f"level {k}: Cauchy increment {norm[0]:.3e}")
        previous = current
    _judge(log, tol)
    if log.diverged:
        logger.warning(f"Reconstruction of {F.label} did not converge: increments {log.increments}")
    return ReconstructionResult(history[-1], log, history)


class PartialReconstruction:
    """R^theta_x(F) as a map from test functions to per-sample values."""

    def __init__(self, F: Germ, theta: IndexSet, x: Sequence[float], basis: WaveletBasisD,
                 n_max: Optional[int] = None, cauchy_tol: Optional[float] = None):
        self.F = F
        self.theta = theta
        self.x = np.asarray(x, dtype=float)
        self.basis = basis
        self.n_max = n_max
        self.cauchy_tol = cauchy_tol
        self.logs: Dict[str, ConvergenceLog] = {}

    def evaluate(self, psi: TestFunction, x: Optional[Sequence[float]] = None) -> np.ndarray:
        base = self.x if x is None else np.asarray(x, dtype=float)
        result = reconstruct(self.F, self.theta, base, psi, self.basis, self.n_max, self.cauchy_tol)
        self.logs[psi.label or str(id(psi))] = result.log
        return result.values

    __call__ = evaluate


def _increment_by_evaluation(F: Germ, kappa: IndexSet, x: np.ndarray, coeffs: LatticeCoefficients,
                             basis: WaveletBasisD) -> np.ndarray:
    """(-1)^{#kappa} sum_y box^kappa_{x,y} F(phi^n_y) <phi^n_y, psi>, pairing the germ with each wavelet directly."""
    sign = -1.0 if len(kappa) % 2 else 1.0
    total = np.zeros(F.M)
    for idx in np.argwhere(coeffs.values != 0.0):
        y = np.array([coeffs.points(axis)[k] for axis, k in enumerate(idx)])
        phi = basis.wavelet(IndexSet.empty(basis.d), coeffs.levels, y, coeffs.T)
        value = rect_increment(kappa, x, y, lambda z: F.evaluate(z, phi))
        total = total + sign * coeffs.values[tuple(idx)] * np.asarray(value, dtype=float)
    return total


def rect_germ_sum(F: Germ, kappa: IndexSet, x: Sequence[float], psi: TestFunction, n,
                  basis: WaveletBasisD, tol: Optional[float] = None, crosscheck: bool = False) -> np.ndarray:
    """
    g^{kappa,n}_x(psi) as the alternating sum of partial reconstructions.

    With crosscheck, the same quantity is rebuilt from rectangular increments of the
    germ evaluated on every wavelet, and a disagreement raises ConsistencyError.
    """
    coeffs = _checked_coefficients(basis, n, psi)
    by_partials = 0.0
    for eta in kappa.subsets():
        sign = -1.0 if len(eta) % 2 else 1.0
        evals = F.cached_evaluations(eta, x, n, basis)
        by_partials = by_partials + sign * _contract(evals.values, coeffs.values)
    by_partials = np.asarray(by_partials, dtype=float)
    if not crosscheck:
        return by_partials

    if tol is None:
        tol = settings.consistency_tolerance if basis.base.family == "haar" else settings.crosscheck_tolerance
    by_increment = _increment_by_evaluation(F, kappa, np.asarray(x, dtype=float), coeffs, basis)
    scale = max(1.0, float(np.max(np.abs(by_increment))))
    mismatch = float(np.max(np.abs(by_partials - by_increment)))
    if mismatch > tol * scale:
        raise ConsistencyError(f"Rectangular germ sums disagree by {mismatch:.3e} for kappa={kappa}")
    return by_partials


def incoherent_germ(noise: NoiseSample, seed: int) -> ProductGerm:
    """F_x = h(x) xi with a frozen field of independent signs."""
    h = incoherent_field(noise.N, noise.T, noise.d, seed)
    return ProductGerm(h, white_noise_distribution(noise), label="incoherent")


def _lambda_points(N: int, T: float) -> List[float]:
    return [T / (1 << k) for k in range(1, int(round(np.log2(N))) - 2)]


def verify_characterization(F: Germ, params: CoherenceClass, basis: WaveletBasisD,
                            psi: Optional[TestFunction] = None, x: Optional[Sequence[float]] = None,
                            noise: Optional[NoiseSample] = None, m: float = 2.0, points: int = 8,
                            seed: int = 0, n: Optional[int] = None,
                            slope_tolerance: float = 0.1) -> CharacterizationReport:
    """
    Check the four characterizing properties of the reconstruction family on a germ.

    Args:
        F: the germ
        params: its coherence class (alpha, gamma, delta)
        basis: wavelet basis used for every partial sum
        psi: test function for properties 1-3 (default: indicator of a dyadic box)
        x: base point for properties 1-3
        noise: noise the germ is built on, enables the measurability check
        n: reconstruction level (default: finest level of the grid)
    """
    d = F.d
    T = F.T
    N = _grid_size(F)
    n = int(round(np.log2(N))) if n is None else n
    psi = psi or TestFunction.indicator([T / 4] * d, [3 * T / 4] * d, T)
    x = np.asarray([T / 4] * d if x is None else x, dtype=float)
    report = CharacterizationReport(identity_error=0.0, independence_error=0.0)

    # (1) R^empty_x = F_x
    r_empty = partial_sum(F, IndexSet.empty(d), x, psi, n, basis)
    direct = F.evaluate(x, psi)
    report.identity_error = float(np.max(np.abs(r_empty - direct)))

    # (2) independence of x_theta
    h = T / N
    for theta in IndexSet.all_subsets(d)[1:]:
        moved = x.copy()
        moved[list(theta.axes)] = np.clip(moved[list(theta.axes)] + 3 * h, 0.0, T)
        a = partial_sum(F, theta, x, psi, n, basis)
        b = partial_sum(F, theta, moved, psi, n, basis)
        report.independence_error = max(report.independence_error, float(np.max(np.abs(a - b))))

    # (3) measurability: values do not move when noise beyond the support is altered
    if noise is not None:
        try:
            width = basis.base.width * T / (1 << n)
            upper = [min(T, b + width) for _, b in psi.support]
            mask = FiltrationMask.of(IndexSet.full(d), upper)
            rebuilt = F.rebuild(noise.masked(mask))
            full = partial_sum(F, IndexSet.full(d), x, psi, n, basis)
            cut = partial_sum(rebuilt, IndexSet.full(d), x, psi, n, basis)
            report.measurability_error = float(np.max(np.abs(full - cut)))
        except UnsupportedOperationError as exc:
            report.flags.append(f"measurability not checked: {exc}")
    else:
        report.flags.append("measurability not checked: no noise given")

    # (4) lambda scaling of the alternating sums
    lams = _lambda_points(N, T)
    bases = sample_grid_points(N, T, d, points, seed, high=T - lams[0])
    bump = TestFunction.bump(T, d)
    for theta in IndexSet.all_subsets(d):
        sizes = []
        for lam in lams:
            norms = []
            for j, base in enumerate(bases):
                test = rescale(bump, base, lam)
                # one independent rebuild per theta, at the cheapest scale
                values = rect_germ_sum(F, theta, base, test, n, basis, crosscheck=(lam == lams[-1] and j == 0))
                norms.append(float(lm_norms(values.reshape(-1, 1), m)[0][0]))
            sizes.append(float(np.mean(norms)))
        key = theta.label()
        predicted = (sum(params.gamma[i] for i in theta.axes)
                     + sum(params.alpha[i] for i in theta.complement().axes))
        report.predicted[key] = predicted
        try:
            fit = fit_rate(lams, sizes)
        except InvalidArgumentError:
            report.flags.append(f"no scaling fit for theta={key}")
            continue
        report.scaling_fits[key] = fit
        if abs(fit.slope - predicted) > slope_tolerance:
            report.passed = False
            report.flags.append(f"theta={key}: slope {fit.slope:.3f} vs predicted {predicted:.3f}")

    # regularity of R(F) itself: R^{[d]} does not depend on the base point
    full = IndexSet.full(d)
    sizes = []
    for lam in lams:
        norms = []
        for base in bases:
            test = rescale(bump, base, lam)
            values = partial_sum(F, full, base, test, n, basis)
            norms.append(float(lm_norms(values.reshape(-1, 1), m)[0][0]))
        sizes.append(float(np.mean(norms)))
    try:
        report.regularity_fit = fit_rate(lams, sizes)
    except InvalidArgumentError:
        report.flags.append("no regularity fit")

    tol = 1e-8
    if report.independence_error > tol:
        report.passed = False
    if report.measurability_error is not None and report.measurability_error > tol:
        report.passed = False
    return report
