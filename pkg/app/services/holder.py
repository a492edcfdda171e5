"""
Empirical Holder-type norms of fields, distributions and germs.

All suprema are taken over finite dyadic samplings of base points, separations and
scales, so every value is a lower bound of the true norm. Rate fits regress log2 of
the typical size against log2 of the scale.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..config import settings
from ..exceptions import InvalidArgumentError, NotAdaptedError, UnsupportedOperationError
from ..models.distributions import RandomDistribution
from ..models.germs import Germ
from ..models.grid_field import FieldKind, GridField
from ..models.schemas import (
    BdgReport,
    CoherenceReport,
    DistributionNormReport,
    EmbeddingReport,
    RateFit,
    SeminormEntry,
    SeminormTable,
)
from ..models.test_function import TestFunction, bump_profile
from .increments import IndexSet, project
from .noise import FiltrationMask, NoiseSample, conditional_expectation
from .wavelets import rescale

logger = logging.getLogger(__name__)


# fitting and moments ---------------------------------------------------------


def fit_rate(scales: Sequence[float], values: Sequence[float], axis: Optional[int] = None,
             min_points: Optional[int] = None) -> RateFit:
    """
    Ordinary least squares of log2(values) on log2(scales).

    Raises:
        InvalidArgumentError: fewer than min_points usable (positive, finite) values
    """
    min_points = settings.min_fit_points if min_points is None else min_points
    scales = np.asarray(scales, dtype=float)
    values = np.asarray(values, dtype=float)
    keep = (scales > 0) & (values > 0) & np.isfinite(values)
    if keep.sum() < min_points:
        raise InvalidArgumentError(f"Rate fit needs at least {min_points} positive points, got {int(keep.sum())}")
    x = np.log2(scales[keep])
    y = np.log2(values[keep])
    slope, intercept = np.polyfit(x, y, 1)
    residual = y - (slope * x + intercept)
    total = y - y.mean()
    ss_tot = float(np.dot(total, total))
    r2 = 1.0 - float(np.dot(residual, residual)) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(slope=float(slope), intercept=float(intercept), r2=r2,
                   separations=scales[keep].tolist(), values=values[keep].tolist(), axis=axis)


def _try_fit(scales, values, axis=None) -> Optional[RateFit]:
    try:
        return fit_rate(scales, values, axis)
    except InvalidArgumentError:
        return None


def lm_norms(values: np.ndarray, m: float = 2.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    L_m norms over the sample axis 0 with standard errors.

    m = 2 uses the delta method on the second moment; other m use batch means.
    """
    values = np.asarray(values, dtype=float)
    M = values.shape[0]
    if m < 1:
        raise InvalidArgumentError(f"Moment order must be at least 1, got {m}")
    powers = np.abs(values) ** m
    moment = powers.mean(axis=0)
    norms = moment ** (1.0 / m)
    if M < 2:
        return norms, np.zeros_like(norms)
    if m == 2:
        moment_se = powers.std(axis=0, ddof=1) / np.sqrt(M)
        with np.errstate(divide="ignore", invalid="ignore"):
            se = np.where(norms > 0, moment_se / (2.0 * norms), 0.0)
        return norms, se
    batches = max(2, min(settings.batch_count, M))
    usable = (M // batches) * batches
    batch_norms = (powers[:usable].reshape((batches, -1) + powers.shape[1:]).mean(axis=1)) ** (1.0 / m)
    se = batch_norms.std(axis=0, ddof=1) / np.sqrt(batches)
    return norms, se


# sampling ------------------------------------------------------------------------


def dyadic_separations(N: int, T: float, levels: Optional[Sequence[int]] = None) -> List[float]:
    """Separations T 2^-j for the configured levels that the grid resolves, largest first."""
    levels = settings.separation_levels if levels is None else levels
    return [T / (1 << j) for j in sorted(levels) if (1 << j) <= N]


def sample_grid_points(N: int, T: float, d: int, count: int, seed: int,
                       low: float = 0.0, high: Optional[float] = None) -> np.ndarray:
    """count grid corners with every coordinate in [low, high]."""
    h = T / N
    high = T if high is None else high
    k_lo = int(np.ceil(low / h - 1e-9))
    k_hi = int(np.floor(high / h + 1e-9))
    if k_hi < k_lo:
        raise InvalidArgumentError(f"No grid points in [{low}, {high}] at N={N}")
    rng = np.random.Generator(np.random.Philox(key=seed))
    return rng.integers(k_lo, k_hi + 1, size=(count, d)) * h


@dataclass(frozen=True)
class ConditioningContext:
    """
    How to evaluate conditional expectations of quantities built on a noise sample.

    rebuild maps a noise sample to the object under study (field, distribution or
    germ); when omitted, the object's own rebuild method is used.
    """

    noise: NoiseSample
    rebuild: Optional[Callable[[NoiseSample], Any]] = None
    linear: bool = False
    resamples: Optional[int] = None

    def rebuilt(self, obj, noise: NoiseSample):
        if self.rebuild is not None:
            return self.rebuild(noise)
        if hasattr(obj, "rebuild"):
            return obj.rebuild(noise)
        raise UnsupportedOperationError(f"Cannot rebuild {type(obj).__name__} on resampled noise")

    def expect(self, functional: Callable[[NoiseSample], np.ndarray], mask: FiltrationMask) -> np.ndarray:
        return conditional_expectation(functional, mask, self.noise, self.resamples, self.linear)


def _designs(theta_axes: Tuple[int, ...], d: int, scales: Sequence[float]) -> List[Tuple[Optional[int], float, np.ndarray]]:
    """(varied axis or None for isotropic, scale, per-axis vector) with non-theta entries 0."""
    ref = scales[0]
    out = []
    for s in scales:
        vec = np.zeros(d)
        vec[list(theta_axes)] = s
        out.append((None, s, vec))
    for axis in theta_axes:
        for s in scales:
            vec = np.zeros(d)
            vec[list(theta_axes)] = ref
            vec[axis] = s
            out.append((axis, s, vec))
    return out


def _power(vec: np.ndarray, exps: Sequence[float], axes: Sequence[int]) -> float:
    return float(np.prod([vec[i] ** exps[i] for i in axes])) if axes else 1.0


def _collect_fits(designs, sizes: np.ndarray, theta_axes) -> Tuple[Optional[RateFit], List[RateFit]]:
    iso = [(s, sizes[j]) for j, (axis, s, _) in enumerate(designs) if axis is None]
    fit = _try_fit([s for s, _ in iso], [v for _, v in iso])
    axis_fits = []
    for axis in theta_axes:
        pts = [(s, sizes[j]) for j, (a, s, _) in enumerate(designs) if a == axis]
        f = _try_fit([s for s, _ in pts], [v for _, v in pts], axis + 1)
        if f is not None:
            axis_fits.append(f)
    return fit, axis_fits


def _vector(values: Optional[Sequence[float]], d: int, default: float, name: str) -> Tuple[float, ...]:
    if values is None:
        return (default,) * d
    if np.isscalar(values):
        return (float(values),) * d
    out = tuple(float(v) for v in values)
    if len(out) != d:
        raise InvalidArgumentError(f"{name} has {len(out)} entries for d={d}")
    return out


# fields -------------------------------------------------------------------------


def deterministic_norm(f: GridField, alpha, points: Optional[int] = None, seed: int = 0,
                       separation_levels: Optional[Sequence[int]] = None) -> SeminormTable:
    """sup |box_theta f| / prod |x_i - y_i|^alpha_i over sampled dyadic pairs, for every theta."""
    if f.kind != FieldKind.CORNER_VALUES or not f.deterministic:
        raise InvalidArgumentError("Deterministic norms need a single corner-valued field")
    d = f.d
    alpha = _vector(alpha, d, 0.0, "alpha")
    seps = dyadic_separations(f.N, f.T, separation_levels)
    pts = sample_grid_points(f.N, f.T, d, points or settings.base_points, seed, high=f.T - seps[0])
    table = SeminormTable(alpha=list(alpha), m=float("inf"))
    for theta in IndexSet.all_subsets(d)[1:]:
        designs = _designs(theta.axes, d, seps)
        ratios = []
        sizes = np.zeros(len(designs))
        for j, (_, _, vec) in enumerate(designs):
            inc = np.abs(f.rect_increments(theta.axes, pts, pts + vec)[0])
            ratios.append(inc.max() / _power(vec, alpha, theta.axes))
            sizes[j] = np.sqrt(np.mean(inc ** 2))
        fit, axis_fits = _collect_fits(designs, sizes, theta.axes)
        table.entries.append(SeminormEntry(theta=list(theta.members), value=float(max(ratios)), fit=fit,
                                           axis_fits=axis_fits))
    return table


def stochastic_seminorms(Y: GridField, alpha, delta=None, m: float = 2.0,
                         context: Optional[ConditioningContext] = None, points: Optional[int] = None,
                         conditional_points: Optional[int] = None, seed: int = 0,
                         separation_levels: Optional[Sequence[int]] = None) -> SeminormTable:
    """
    Table of sup ||E^eta_x box^theta_{x,y} Y||_m / (|x-y|^alpha_theta |x-y|^delta_eta) over theta and eta in theta.

    Without a conditioning context only eta = empty entries are produced and the table is flagged.
    """
    if Y.kind != FieldKind.CORNER_VALUES:
        raise InvalidArgumentError("Stochastic seminorms need a corner-valued field")
    if not Y.adapted:
        raise NotAdaptedError(f"Field {Y.label or '<unnamed>'} is not adapted")
    d = Y.d
    alpha = _vector(alpha, d, 0.0, "alpha")
    delta = _vector(delta, d, 0.0, "delta")
    seps = dyadic_separations(Y.N, Y.T, separation_levels)
    pts = sample_grid_points(Y.N, Y.T, d, points or settings.base_points, seed, high=Y.T - seps[0])
    cond_count = min(len(pts), conditional_points or settings.conditional_points)
    table = SeminormTable(alpha=list(alpha), delta=list(delta), m=m)
    if context is None:
        table.flags.append("conditioning unsupported: only eta = {} entries estimated")
        logger.warning("No conditioning context given; falling back to unconditioned entries")

    for theta in IndexSet.all_subsets(d)[1:]:
        designs = _designs(theta.axes, d, seps)
        vecs = np.stack([vec for _, _, vec in designs])
        for eta in theta.subsets():
            if eta and context is None:
                continue
            if not eta:
                norms = np.zeros((len(pts), len(designs)))
                ses = np.zeros_like(norms)
                for j, vec in enumerate(vecs):
                    inc = Y.rect_increments(theta.axes, pts, pts + vec)
                    norms[:, j], ses[:, j] = lm_norms(inc, m)
            else:
                norms = np.zeros((cond_count, len(designs)))
                ses = np.zeros_like(norms)
                for p in range(cond_count):
                    lo = np.repeat(pts[p:p + 1], len(designs), axis=0)
                    mask = FiltrationMask.of(eta, pts[p])

                    def functional(nz, lo=lo):
                        return context.rebuilt(Y, nz).rect_increments(theta.axes, lo, lo + vecs)

                    cond = context.expect(functional, mask)
                    norms[p], ses[p] = lm_norms(cond, m)
            denom = np.array([_power(v, alpha, theta.axes) * _power(v, delta, eta.axes) for v in vecs])
            ratios = norms / denom
            best = np.unravel_index(int(np.argmax(ratios)), ratios.shape)
            fit, axis_fits = _collect_fits(designs, norms.mean(axis=0), theta.axes)
            table.entries.append(SeminormEntry(
                theta=list(theta.members), eta=list(eta.members), value=float(ratios[best]),
                se=float(ses[best] / denom[best[1]]), fit=fit, axis_fits=axis_fits,
            ))
    logger.debug(f"Seminorm table for {Y.label or '<unnamed>'}: {len(table.entries)} entries")
    return table


def embedding_check(Y: GridField, alpha_low, alpha_high, delta=None, m: float = 2.0,
                    context: Optional[ConditioningContext] = None, seed: int = 0) -> EmbeddingReport:
    """Lower-exponent norm against the T-scaled higher-exponent norm for fields vanishing on the 0-boundary."""
    d = Y.d
    low_a = _vector(alpha_low, d, 0.0, "alpha_low")
    high_a = _vector(alpha_high, d, 0.0, "alpha_high")
    if any(lo > hi for lo, hi in zip(low_a, high_a)):
        raise InvalidArgumentError("alpha_low must not exceed alpha_high")
    low = stochastic_seminorms(Y, low_a, delta, m, context, seed=seed)
    high = stochastic_seminorms(Y, high_a, delta, m, context, seed=seed)
    low_norm = max(e.value for e in low.entries)
    high_norm = max(e.value for e in high.entries)
    bound = 4.0 * Y.T ** max(h - lo for h, lo in zip(high_a, low_a)) * high_norm
    return EmbeddingReport(alpha_low=list(low_a), alpha_high=list(high_a), low_norm=low_norm,
                           high_norm=high_norm, bound=bound, passed=bool(low_norm <= bound))


# distributions ---------------------------------------------------------------------


def _lambda_scales(N: int, T: float, first: int = 1) -> List[float]:
    top = int(round(np.log2(N))) - 3
    return [T / (1 << k) for k in range(first, top + 1)]


def _grid_size(obj) -> int:
    for attr in ("N",):
        if hasattr(obj, attr):
            return int(getattr(obj, attr))
    for child in ("dist", "field"):
        if hasattr(obj, child):
            return _grid_size(getattr(obj, child))
    if hasattr(obj, "terms"):
        return _grid_size(obj.terms[0][1])
    raise InvalidArgumentError(f"Cannot infer grid size of {type(obj).__name__}")


def distribution_norm(f: RandomDistribution, alpha, delta=None, m: float = 2.0,
                      context: Optional[ConditioningContext] = None, points: Optional[int] = None,
                      conditional_points: Optional[int] = None, psi: Optional[TestFunction] = None,
                      seed: int = 0, N: Optional[int] = None) -> DistributionNormReport:
    """sup over (x, lambda, eta) of ||E^eta_x f(psi^lambda_x)||_m / (lambda^alpha lambda^delta_eta)."""
    d = f.d
    N = N or _grid_size(f)
    alpha = _vector(alpha, d, 0.0, "alpha")
    delta = _vector(delta, d, 0.0, "delta")
    psi = psi or TestFunction.bump(f.T, d)
    lams = _lambda_scales(N, f.T)
    if len(lams) < settings.min_fit_points:
        raise InvalidArgumentError(f"Grid N={N} resolves only {len(lams)} scales")
    pts = sample_grid_points(N, f.T, d, points or settings.base_points, seed, high=f.T - lams[0])
    full = IndexSet.full(d)
    designs = _designs(full.axes, d, lams)
    report = DistributionNormReport(value=0.0)
    cond_count = min(len(pts), conditional_points or settings.conditional_points)

    for eta in full.subsets():
        if eta and context is None:
            continue
        count = len(pts) if not eta else cond_count
        norms = np.full((count, len(designs)), np.nan)
        ses = np.zeros_like(norms)
        for p in range(count):
            x = pts[p]
            tests = []
            for j, (_, _, vec) in enumerate(designs):
                scaled = rescale(psi, x, vec)
                if not scaled.in_domain():
                    report.skipped += 1
                    continue
                tests.append((j, scaled))
            if not tests:
                continue
            idx = [j for j, _ in tests]
            if not eta:
                values = np.stack([f.pair(t) for _, t in tests], axis=1)
            else:
                def functional(nz, tests=tests):
                    g = context.rebuilt(f, nz)
                    return np.stack([g.pair(t) for _, t in tests], axis=1)

                values = context.expect(functional, FiltrationMask.of(eta, x))
            norms[p, idx], ses[p, idx] = lm_norms(values, m)
        denom = np.array([_power(v, alpha, full.axes) * _power(v, delta, eta.axes) for _, _, v in designs])
        ratios = norms / denom
        if np.all(np.isnan(ratios)):
            continue
        best = np.unravel_index(int(np.nanargmax(ratios)), ratios.shape)
        report.entries.append(SeminormEntry(theta=list(full.members), eta=list(eta.members),
                                            value=float(ratios[best]), se=float(ses[best] / denom[best[1]])))
        if not eta:
            sizes = np.nanmean(norms, axis=0)
            _, report.fits = _collect_fits(designs, sizes, full.axes)
    if report.skipped:
        logger.warning(f"distribution_norm skipped {report.skipped} test functions leaving the domain")
    if context is None:
        report.flags.append("conditioning unsupported: only eta = {} entries estimated")
    report.value = max((e.value for e in report.entries), default=0.0)
    return report


# germs -------------------------------------------------------------------------


def coherence_test_function(theta: IndexSet, T: float, level: Optional[int] = None) -> TestFunction:
    """Bump supported in [1/4,3/4] on theta axes and in [-1/4,1/4] on the others."""
    profiles = []
    support = []
    for i in range(theta.d):
        if (i + 1) in theta:
            profiles.append(bump_profile)
            support.append((0.25, 0.75))
        else:
            profiles.append(lambda u: bump_profile(np.asarray(u) + 0.5))
            support.append((-0.25, 0.25))
    return TestFunction.separable(profiles, T, tuple(support), level=level, smoothness=3, label="coherence_bump")


def germ_increment(F: Germ, theta: IndexSet, x, y, psi: TestFunction) -> np.ndarray:
    """box^theta_{x,y} F(psi) = sum over theta' in theta of (-1)^#(theta - theta') F_{pi^theta'_y x}(psi)."""
    total = 0.0
    for sub in theta.subsets():
        sign = -1.0 if (len(theta) - len(sub)) % 2 else 1.0
        total = total + sign * F.evaluate(project(sub, y, x), psi)
    return np.asarray(total, dtype=float)


def coherence_norm(F: Germ, alpha, gamma, delta=None, m: float = 2.0,
                   context: Optional[ConditioningContext] = None, points: Optional[int] = None,
                   conditional_points: Optional[int] = None, seed: int = 0,
                   N: Optional[int] = None) -> CoherenceReport:
    """
    sup of ||E^eta_x box^theta_{x,y} F(psi^lambda_y)||_m
        / (lambda^alpha (|x-y|+lambda)^(gamma-alpha)_theta (|x-y|+lambda)^delta_eta)
    over sampled x <= y in theta directions.
    """
    d = F.d
    T = F.T
    N = N or _grid_size(F)
    alpha = _vector(alpha, d, 0.0, "alpha")
    gamma = _vector(gamma, d, 0.0, "gamma")
    delta = _vector(delta, d, 0.0, "delta")
    lams = _lambda_scales(N, T, first=2)
    seps = dyadic_separations(N, T)
    if not lams:
        raise InvalidArgumentError(f"Grid N={N} too coarse for coherence scales")
    pts = sample_grid_points(N, T, d, points or settings.base_points, seed, low=T / 4, high=T / 2)
    cond_count = min(len(pts), conditional_points or settings.conditional_points)
    report = CoherenceReport(value=0.0)

    for theta in IndexSet.all_subsets(d):
        base_psi = coherence_test_function(theta, T)
        pairs = [(lam, s) for lam in lams for s in (seps if theta else [0.0])]
        for eta in theta.subsets():
            if eta and context is None:
                continue
            count = len(pts) if not eta else cond_count
            best_ratio, best_se = 0.0, 0.0
            for p in range(count):
                y = pts[p]
                for lam, s in pairs:
                    x = y.copy()
                    x[list(theta.axes)] -= s
                    psi = rescale(base_psi, y, lam)
                    if not psi.in_domain():
                        report.skipped += 1
                        continue
                    if not eta:
                        values = germ_increment(F, theta, x, y, psi)
                    else:
                        def functional(nz, x=x, y=y, psi=psi):
                            return germ_increment(context.rebuilt(F, nz), theta, x, y, psi)

                        values = context.expect(functional, FiltrationMask.of(eta, x))
                    norm, se = lm_norms(values.reshape(-1, 1), m)
                    scale = s + lam
                    denom = (float(np.prod([lam ** a for a in alpha]))
                             * float(np.prod([scale ** (gamma[i] - alpha[i]) for i in theta.axes]))
                             * float(np.prod([scale ** delta[i] for i in eta.axes])))
                    ratio = float(norm[0]) / denom
                    if ratio > best_ratio:
                        best_ratio, best_se = ratio, float(se[0]) / denom
            report.entries.append(SeminormEntry(theta=list(theta.members), eta=list(eta.members),
                                                value=best_ratio, se=best_se))
    if context is None:
        report.flags.append("conditioning unsupported: only eta = {} entries estimated")
    report.value = max((e.value for e in report.entries), default=0.0)
    return report


def resample_sensitivity(F: Germ, context: ConditioningContext, lam: Optional[float] = None,
                         resamples: Optional[int] = None) -> Dict[str, float]:
    """
    Compare the K- and 2K-resample estimates of E^{full}_x box^{full}_{x,y} F(psi^lambda_y)
    at x = T/4, y = x + lambda on every axis (lambda defaults to T/8).
    """
    d, T = F.d, F.T
    lam = T / 8 if lam is None else lam
    K = resamples or context.resamples or settings.resample_count
    theta = IndexSet.full(d)
    x = np.full(d, T / 4)
    y = x + lam
    psi = rescale(coherence_test_function(theta, T), y, lam)
    if not psi.in_domain():
        raise InvalidArgumentError(f"Scale {lam} puts the test function outside the domain")

    def functional(nz):
        return germ_increment(context.rebuilt(F, nz), theta, x, y, psi)

    mask = FiltrationMask.of(theta, x)
    single = conditional_expectation(functional, mask, context.noise, K)
    doubled = conditional_expectation(functional, mask, context.noise, 2 * K)
    norm = float(np.sqrt(np.mean(doubled ** 2)))
    change = float(np.sqrt(np.mean((single - doubled) ** 2)))
    logger.info(f"Resample sensitivity K={K}: relative change {change / norm if norm > 0 else 0.0:.3g}")
    return {"resamples": K, "l2_single": float(np.sqrt(np.mean(single ** 2))), "l2_doubled": norm,
            "relative_change": change / norm if norm > 0 else 0.0}


# extended BDG ------------------------------------------------------------------------


def _axis_constants(norms: np.ndarray) -> List[np.ndarray]:
    """Separable per-axis constants from the marginal maxima of a norm array."""
    d = norms.ndim
    out = []
    for i in range(d):
        other = tuple(j for j in range(d) if j != i)
        marg = norms.max(axis=other) if other else norms
        out.append(np.maximum(marg, 1e-300) ** (1.0 / d))
    return out


def _product(consts: List[np.ndarray], index: Sequence[int], axes: Sequence[int]) -> float:
    return float(np.prod([consts[i][index[i]] for i in axes])) if axes else 1.0


def bdg_check(builder: Callable[[NoiseSample], np.ndarray], noise: NoiseSample, theta: IndexSet, eta: IndexSet,
              m: float = 2.0, linear: bool = False, resamples: Optional[int] = None,
              constant: Optional[float] = None, seed: int = 0) -> BdgReport:
    """
    Check ||E^eta_y sum_{k in I_theta(y)} Z_k||_m <= C * (mixed sum bound) at the origin and at sampled
    grid anchors y; the report carries the anchor with the largest ratio.

    Args:
        builder: maps noise to Z of shape (M, n, ..., n), Z_k measurable w.r.t. the cells below k+1
        noise: noise sample the array is built on
        theta, eta: index sets of the summation and the conditioning
        linear: Z is linear in the noise (exact conditioning)
    """
    constant = settings.bdg_constant if constant is None else constant
    Z = np.asarray(builder(noise), dtype=float)
    d = Z.ndim - 1
    n = Z.shape[1]
    if d != noise.d or noise.N % n:
        raise InvalidArgumentError(f"Index array of shape {Z.shape[1:]} does not fit the {noise.N}^{noise.d} noise")
    coarse_h = noise.T / n

    unconditioned, _ = lm_norms(Z, m)
    a = _axis_constants(unconditioned)

    rng = np.random.Generator(np.random.Philox(key=seed))
    sampled = rng.integers(0, n, size=(settings.bdg_hypothesis_points, d))
    ratios_b = np.zeros(d)
    cond_norms: Dict[Tuple[int, Tuple[int, ...]], float] = {}
    for sub in IndexSet.all_subsets(d)[1:]:
        for k in sampled:
            k = tuple(int(v) for v in k)
            mask = FiltrationMask.of(sub, [ki * coarse_h for ki in k])
            cond = conditional_expectation(lambda nz, k=k: np.asarray(builder(nz))[(slice(None),) + k],
                                           mask, noise, resamples, linear)
            cond_norms[(sub.mask, k)] = float(lm_norms(cond.reshape(-1, 1), m)[0][0])
            if len(sub) == 1:
                i = sub.axes[0]
                base = unconditioned[k]
                if base > 0:
                    ratios_b[i] = max(ratios_b[i], cond_norms[(sub.mask, k)] / base)
    b = [a[i] * (ratios_b[i] if ratios_b[i] > 0 else 1e-12) for i in range(d)]

    c = 0.0
    full_axes = tuple(range(d))
    for index in np.ndindex(*Z.shape[1:]):
        c = max(c, unconditioned[index] / _product(a, index, full_axes))
    for (mask_bits, k), value in cond_norms.items():
        sub = IndexSet(mask_bits, d)
        bound = _product(b, k, sub.axes) * _product(a, k, sub.complement().axes)
        c = max(c, value / bound)

    def block_sum(Z_: np.ndarray, k0: Tuple[int, ...]) -> np.ndarray:
        index = tuple(slice(k0[i], None) if (i + 1) in theta else k0[i] for i in range(d))
        block = Z_[(slice(None),) + index]
        return block.reshape(Z_.shape[0], -1).sum(axis=1)

    def mixed_bound(k0: Tuple[int, ...]) -> float:
        rhs = 0.0
        rest = theta.difference(eta)
        for theta2 in rest.subsets():
            theta1 = rest.difference(theta2)
            b_set = eta.union(theta1)
            summed = theta.difference(theta2)
            first = 1.0
            for i in b_set.axes:
                first *= float(b[i][k0[i]:].sum()) if (i + 1) in summed else float(b[i][k0[i]])
            second = 1.0
            for i in b_set.complement().axes:
                second *= float((a[i][k0[i]:] ** 2).sum()) if (i + 1) in theta2 else float(a[i][k0[i]] ** 2)
            rhs += first * np.sqrt(second)
        return c * rhs

    # sums over I_theta anchored at the origin and at sampled corners y
    corners = sample_grid_points(n, noise.T, d, settings.bdg_anchor_points, seed + 1, high=noise.T - coarse_h)
    anchors = [(0,) * d] + sorted({tuple(int(round(v / coarse_h)) for v in p) for p in corners} - {(0,) * d})
    worst = None
    for k0 in anchors:
        if eta:
            mask = FiltrationMask.of(eta, [ki * coarse_h for ki in k0])
            total = conditional_expectation(lambda nz, k0=k0: block_sum(np.asarray(builder(nz), dtype=float), k0),
                                            mask, noise, resamples, linear)
        else:
            total = block_sum(Z, k0)
        lhs_arr, se_arr = lm_norms(np.asarray(total, dtype=float).reshape(-1, 1), m)
        lhs, lhs_se = float(lhs_arr[0]), float(se_arr[0])
        rhs = mixed_bound(k0)
        ratio = lhs / rhs if rhs > 0 else float("inf")
        candidate = (bool(lhs - 3.0 * lhs_se > constant * rhs), ratio, lhs, lhs_se, rhs, k0)
        if worst is None or candidate[:2] > worst[:2]:
            worst = candidate
    violated, ratio, lhs, lhs_se, rhs, k0 = worst
    if violated:
        logger.warning(f"BDG bound violated: theta={theta}, eta={eta}, anchor={k0}, ratio={ratio:.3f}")
    return BdgReport(theta=list(theta.members), eta=list(eta.members), lhs=lhs, lhs_se=lhs_se, rhs=float(rhs),
                     ratio=float(ratio), a=[float(v.max()) for v in a], b=[float(v.max()) for v in b], c=float(c),
                     violated=violated, constant=constant, anchor=[ki * coarse_h for ki in k0],
                     anchors=len(anchors))


def table_rows(table: SeminormTable) -> List[dict]:
    """One CSV row per (theta, eta, separation)."""
    rows = []
    for e in table.entries:
        if e.fit is None:
            rows.append({"theta": IndexSet.of(e.theta, len(table.alpha)).label(),
                         "eta": IndexSet.of(e.eta, len(table.alpha)).label(),
                         "separation": "", "size": "", "value": e.value, "se": e.se, "slope": "", "r2": ""})
            continue
        for s, v in zip(e.fit.separations, e.fit.values):
            rows.append({"theta": IndexSet.of(e.theta, len(table.alpha)).label(),
                         "eta": IndexSet.of(e.eta, len(table.alpha)).label(),
                         "separation": s, "size": v, "value": e.value, "se": e.se,
                         "slope": e.fit.slope, "r2": e.fit.r2})
    return rows
