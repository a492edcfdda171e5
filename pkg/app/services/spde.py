"""
Grid solver for the mixed hyperbolic equation

    u(x) = I(v)(x) + int_0^x R(sigma(u) . xi + (f u) . dZ)(dy)

with a Walsh term against white noise and a Young term against a deterministic
driver Z. Both integrals use the lower-left corner of each cell, so the discrete
solution at corner x only reads noise cells below x.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import iv

from ..config import settings
from ..exceptions import DivergenceError, HypothesisViolationError, InvalidArgumentError
from ..models.distributions import derivative_of
from ..models.germs import CombinationGerm
from ..models.grid_field import DeclaredClass, FieldKind, GridField, constant_field, corner_grid
from ..models.schemas import RateFit, SeminormTable
from .calculus import compose, germ_primitive, ito_product, scalar_multiply, young_product
from .holder import ConditioningContext, fit_rate, stochastic_seminorms
from .increments import IndexSet
from .noise import FiltrationMask, NoiseSample, deterministic_driver
from .wavelets import WaveletBasisD

logger = logging.getLogger(__name__)

Boundary = Union[float, Callable[[np.ndarray], np.ndarray]]

SIGMAS: Dict[str, Tuple[Callable[[np.ndarray], np.ndarray], float]] = {
    "zero": (lambda u: np.zeros_like(u), 0.0),
    "one": (lambda u: np.ones_like(u), 0.0),
    "linear": (lambda u: u, 1.0),
    "lipschitz": (lambda u: 1.0 + 0.5 * np.sin(u), 0.5),
}


def sigma_from_name(name: str) -> Tuple[Callable[[np.ndarray], np.ndarray], float]:
    try:
        return SIGMAS[name]
    except KeyError:
        raise InvalidArgumentError(f"Unknown diffusion '{name}', expected one of {sorted(SIGMAS)}")


@dataclass
class SpdeProblem:
    """
    Data of the equation on [0,T]^d at the resolution of the driver.

    Exponents are per axis; the construction refuses parameters outside
    delta = beta - 1/2, delta <= alpha < 1/2, alpha + beta + delta > 1 unless override is set.
    """

    driver: GridField
    f: GridField
    sigma: Callable[[np.ndarray], np.ndarray]
    sigma_lipschitz: float
    boundary: Boundary = 1.0
    alpha: Tuple[float, ...] = (0.45, 0.45)
    beta: Tuple[float, ...] = (0.75, 0.75)
    delta: Tuple[float, ...] = (0.25, 0.25)
    override: bool = False
    label: str = "spde"

    def __post_init__(self):
        if not self.driver.deterministic or self.driver.kind != FieldKind.CORNER_VALUES:
            raise InvalidArgumentError("The driver Z must be a deterministic corner field")
        if not self.f.same_grid(self.driver):
            raise InvalidArgumentError("Coefficient f and driver Z must share the grid")
        d = self.driver.d
        self.alpha = tuple(float(a) for a in np.broadcast_to(self.alpha, (d,)))
        self.beta = tuple(float(b) for b in np.broadcast_to(self.beta, (d,)))
        self.delta = tuple(float(dl) for dl in np.broadcast_to(self.delta, (d,)))
        self.check_hypotheses()

    @property
    def d(self) -> int:
        return self.driver.d

    @property
    def N(self) -> int:
        return self.driver.N

    @property
    def T(self) -> float:
        return self.driver.T

    def check_hypotheses(self) -> List[str]:
        problems = []
        for i, (a, b, dl) in enumerate(zip(self.alpha, self.beta, self.delta), start=1):
            if abs(dl - (b - 0.5)) > 1e-12:
                problems.append(f"axis {i}: delta={dl} != beta - 1/2 = {b - 0.5}")
            if not dl <= a < 0.5:
                problems.append(f"axis {i}: need delta <= alpha < 1/2, got delta={dl}, alpha={a}")
            if not a + b + dl > 1:
                problems.append(f"axis {i}: need alpha + beta + delta > 1, got {a + b + dl}")
        if problems:
            if not self.override:
                raise HypothesisViolationError("; ".join(problems))
            logger.warning(f"SPDE hypotheses overridden: {'; '.join(problems)}")
        return problems

    def coarsen(self, factor: int) -> "SpdeProblem":
        return replace(self, driver=self.driver.coarsen(factor), f=self.f.coarsen(factor))


def boundary_term(v: Boundary, x: Sequence[float]) -> float:
    """I(v)(x) = sum over theta strictly inside [d] of (-1)^{1 + #theta^c} v(pi^theta_x 0)."""
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    if not callable(v):
        return float(v)
    total = 0.0
    for theta in IndexSet.all_subsets(d)[:-1]:
        point = np.zeros(d)
        point[list(theta.axes)] = x[list(theta.axes)]
        sign = -1.0 if (1 + d - len(theta)) % 2 else 1.0
        total += sign * float(v(point))
    return total


def boundary_field(v: Boundary, N: int, T: float, d: int) -> GridField:
    """I(v) on every grid corner."""
    if not callable(v):
        return constant_field(float(v), N, T, d, label="I(v)")
    corners = corner_grid(N, T, d)
    total = np.zeros((N + 1,) * d)
    for theta in IndexSet.all_subsets(d)[:-1]:
        points = np.zeros_like(corners)
        points[..., list(theta.axes)] = corners[..., list(theta.axes)]
        sign = -1.0 if (1 + d - len(theta)) % 2 else 1.0
        total += sign * np.asarray(v(points), dtype=float)
    return GridField(total[None, ...], T, FieldKind.CORNER_VALUES, label="I(v)")


# one Picard step --------------------------------------------------------------------


def _cell_contributions(problem: SpdeProblem, left: np.ndarray, noise_cells: np.ndarray,
                        f_cells: np.ndarray, dz_cells: np.ndarray) -> np.ndarray:
    return problem.sigma(left) * noise_cells + f_cells * left * dz_cells


def _as_solution_field(data: np.ndarray, T: float, problem: SpdeProblem, seed: Optional[int]) -> GridField:
    return GridField(data, T, FieldKind.CORNER_VALUES, seed=seed, adapted=True,
                     declared=DeclaredClass(problem.alpha, problem.delta, 2.0), label="u")


def picard_step(u: GridField, problem: SpdeProblem, noise: NoiseSample,
                basis: Optional[WaveletBasisD] = None, path: str = "fast") -> GridField:
    """
    u -> I(v) + primitive[R(sigma(u) . xi)] + primitive[R((f u) . dZ)].

    The fast path sums left-point cell contributions directly; the reconstruction
    path builds the germs and reconstructs them with Haar wavelets (N <= 64).
    """
    if not u.adapted:
        raise InvalidArgumentError("Picard iterates must be adapted")
    if u.N != noise.N or problem.N != noise.N or u.d != noise.d:
        raise InvalidArgumentError(f"Grid mismatch: u N={u.N}, noise N={noise.N}, problem N={problem.N}")
    start = boundary_field(problem.boundary, noise.N, noise.T, noise.d).data

    if path == "fast":
        cells = _cell_contributions(problem, u.lower_left(), noise.data, problem.f.lower_left(),
                                    problem.driver.cell_increments())
        increment = GridField(cells, noise.T, FieldKind.CELL_DENSITY).cumulative().data
    elif path == "reconstruction":
        if basis is None:
            raise InvalidArgumentError("The reconstruction path needs a wavelet basis")
        zeta = derivative_of(problem.driver)
        walsh = ito_product(compose(problem.sigma, u), noise, alpha=problem.alpha)
        young = young_product(scalar_multiply(problem.f, u), zeta, alpha=problem.alpha,
                              beta=tuple(b - 1.0 for b in problem.beta), delta=problem.delta,
                              override=problem.override)
        increment = germ_primitive(CombinationGerm([(1.0, walsh), (1.0, young)]), basis, noise.N).data
    else:
        raise InvalidArgumentError(f"Unknown Picard path '{path}'")
    return _as_solution_field(start + increment, noise.T, problem, noise.seed)


def sup_l2_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Max over grid points of the sample L2 norm of a - b."""
    diff = np.broadcast_to(a, np.broadcast_shapes(a.shape, b.shape)) - b
    return float(np.sqrt(np.mean(diff ** 2, axis=0)).max())


# exact fixed point ---------------------------------------------------------------------


def sweep_solve(problem: SpdeProblem, noise: NoiseSample) -> GridField:
    """
    Exact fixed point of the left-point scheme by a recursion over the first axis.

    Row i+1 only needs the cells of rows <= i, whose lower-left corners are already known.
    """
    N, d, M = noise.N, noise.d, noise.M
    start = boundary_field(problem.boundary, N, noise.T, d).data
    u = np.empty((M,) + (N + 1,) * d)
    u[:, 0] = start[:, 0]
    f_cells = problem.f.lower_left()
    dz = problem.driver.cell_increments()
    partial = np.zeros((M,) + (N + 1,) * (d - 1))
    inner = (slice(None, N),) * (d - 1)
    for i in range(N):
        left = u[(slice(None), i) + inner]
        cells = _cell_contributions(problem, left, noise.data[:, i], f_cells[:, i], dz[:, i])
        for axis in range(1, d):
            cells = np.cumsum(cells, axis=axis)
        partial[(slice(None),) + (slice(1, None),) * (d - 1)] += cells
        u[:, i + 1] = start[:, i + 1] + partial
    return _as_solution_field(u, noise.T, problem, noise.seed)


# solve ---------------------------------------------------------------------------------


@dataclass
class SpdeSolution:
    u: GridField
    differences: List[float] = field(default_factory=list)
    ratios: List[float] = field(default_factory=list)
    converged: bool = False
    patches: int = 1
    patch_ratios: List[float] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def iterations(self) -> int:
        return len(self.differences)

    @property
    def contraction_ratio(self) -> float:
        """Worst per-patch mean contraction, or the mean over the whole run without patching."""
        if self.patch_ratios:
            return max(self.patch_ratios)
        return mean_ratio(self.differences)

    def iteration_rows(self) -> List[dict]:
        rows = []
        for k, diff in enumerate(self.differences, start=1):
            ratio = self.ratios[k - 2] if k >= 2 else float("nan")
            rows.append({"iteration": k, "sup_l2_difference": diff, "ratio": ratio})
        return rows


def _ratios(differences: List[float]) -> List[float]:
    out = []
    for prev, cur in zip(differences, differences[1:]):
        out.append(cur / prev if prev > 0 else 0.0)
    return out


def mean_ratio(differences: Sequence[float]) -> float:
    """Geometric mean of successive difference ratios; exact zeros end the run and are skipped."""
    positive = [d for d in differences if d > 0]
    if len(positive) < 2:
        return 0.0
    return float((positive[-1] / positive[0]) ** (1.0 / (len(positive) - 1)))


def _iterate(step: Callable[[np.ndarray], np.ndarray], initial: np.ndarray, tol: float,
             max_iter: int) -> Tuple[np.ndarray, List[float], bool]:
    current = initial
    differences: List[float] = []
    for _ in range(max_iter):
        nxt = step(current)
        diff = sup_l2_distance(nxt, current)
        differences.append(diff)
        current = nxt
        if not np.isfinite(diff):
            return current, differences, False
        if diff < tol:
            return current, differences, True
    return current, differences, False


def _patch_bounds(N: int, patches: int, d: int):
    size = N // patches
    for index in np.ndindex(*((patches,) * d)):
        yield tuple(k * size for k in index), tuple((k + 1) * size for k in index)


def _patch_boundary(u: np.ndarray, lo: Sequence[int], hi: Sequence[int]) -> np.ndarray:
    """sum over theta strictly inside [d] of (-1)^{1 + #theta^c} u(pi^theta_x lo) for x in the patch."""
    d = len(lo)
    total = None
    for theta in IndexSet.all_subsets(d)[:-1]:
        index = [slice(None)]
        for i in range(d):
            index.append(slice(lo[i], hi[i] + 1) if i in theta.axes else slice(lo[i], lo[i] + 1))
        sign = -1.0 if (1 + d - len(theta)) % 2 else 1.0
        term = sign * u[tuple(index)]
        total = term if total is None else total + term
    return np.broadcast_to(total, (u.shape[0],) + tuple(h - l + 1 for l, h in zip(lo, hi))).copy()


def _patch_step(problem: SpdeProblem, noise: NoiseSample, lo, hi, boundary: np.ndarray):
    cells_index = (slice(None),) + tuple(slice(l, h) for l, h in zip(lo, hi))
    noise_cells = noise.data[cells_index]
    f_cells = problem.f.lower_left()[cells_index]
    dz_cells = problem.driver.cell_increments()[cells_index]
    d = len(lo)

    def step(local: np.ndarray) -> np.ndarray:
        left = local[(slice(None),) + (slice(None, -1),) * d]
        cells = _cell_contributions(problem, left, noise_cells, f_cells, dz_cells)
        for axis in range(1, d + 1):
            cells = np.cumsum(cells, axis=axis)
        out = boundary.copy()
        out[(slice(None),) + (slice(1, None),) * d] += cells
        return out

    return step


def _trial_patch_ratio(problem: SpdeProblem, noise: NoiseSample, patches: int) -> float:
    """Contraction ratio of the first patch after two Picard steps from its boundary data."""
    lo, hi = next(_patch_bounds(noise.N, patches, noise.d))
    start = boundary_field(problem.boundary, noise.N, noise.T, noise.d).data
    u = np.broadcast_to(start, (noise.M,) + start.shape[1:]).copy()
    boundary = _patch_boundary(u, lo, hi)
    step = _patch_step(problem, noise, lo, hi, boundary)
    first = step(boundary)
    second = step(first)
    third = step(second)
    d1 = sup_l2_distance(second, first)
    d2 = sup_l2_distance(third, second)
    return d2 / d1 if d1 > 0 else 0.0


def _solve_patched(problem: SpdeProblem, noise: NoiseSample, tol: float, max_iter: int,
                   solution: SpdeSolution) -> np.ndarray:
    patches = 2 if noise.N >= 2 else 1
    ratio = _trial_patch_ratio(problem, noise, patches)
    while ratio >= settings.patch_contraction_target and patches < settings.max_patches \
            and noise.N // (2 * patches) >= 1:
        patches *= 2
        ratio = _trial_patch_ratio(problem, noise, patches)
    logger.info(f"Patching with {patches}^{noise.d} boxes, trial contraction ratio {ratio:.3f}")
    solution.patches = patches

    start = boundary_field(problem.boundary, noise.N, noise.T, noise.d).data
    u = np.broadcast_to(start, (noise.M,) + start.shape[1:]).copy()
    for lo, hi in _patch_bounds(noise.N, patches, noise.d):
        boundary = _patch_boundary(u, lo, hi)
        step = _patch_step(problem, noise, lo, hi, boundary)
        local, differences, converged = _iterate(step, boundary, tol, max_iter)
        ratios = _ratios(differences)
        solution.patch_ratios.append(mean_ratio(differences))
        solution.differences.extend(differences)
        if not converged:
            raise DivergenceError(
                f"Picard iteration on patch {lo}-{hi} did not converge in {max_iter} steps",
                {"patch": list(lo), "differences": differences, "ratios": ratios},
            )
        u[(slice(None),) + tuple(slice(l, h + 1) for l, h in zip(lo, hi))] = local
    solution.ratios = _ratios(solution.differences)
    return u


def solve(problem: SpdeProblem, noise: NoiseSample, basis: Optional[WaveletBasisD] = None,
          tol: Optional[float] = None, max_iter: Optional[int] = None, patching: bool = False,
          path: str = "fast") -> SpdeSolution:
    """
    Picard iteration to a sup-L2 tolerance.

    Raises:
        DivergenceError: no convergence within max_iter steps or a non-finite iterate
    """
    tol = settings.spde_tolerance if tol is None else tol
    max_iter = settings.spde_max_iter if max_iter is None else max_iter
    if problem.N != noise.N or problem.d != noise.d:
        raise InvalidArgumentError(f"Problem grid N={problem.N} does not match noise N={noise.N}")
    started = time.time()
    solution = SpdeSolution(u=boundary_field(problem.boundary, noise.N, noise.T, noise.d))

    if patching:
        data = _solve_patched(problem, noise, tol, max_iter, solution)
        solution.u = _as_solution_field(data, noise.T, problem, noise.seed)
        solution.converged = True
    else:
        initial = boundary_field(problem.boundary, noise.N, noise.T, noise.d).data
        initial = np.broadcast_to(initial, (noise.M,) + initial.shape[1:]).copy()

        def step(data: np.ndarray) -> np.ndarray:
            return picard_step(_as_solution_field(data, noise.T, problem, noise.seed), problem, noise,
                               basis, path).data

        data, differences, converged = _iterate(step, initial, tol, max_iter)
        solution.differences = differences
        solution.ratios = _ratios(differences)
        if not converged:
            raise DivergenceError(
                f"Picard iteration did not reach tolerance {tol:g} in {max_iter} steps",
                {"differences": differences, "ratios": solution.ratios},
            )
        solution.u = _as_solution_field(data, noise.T, problem, noise.seed)
        solution.converged = True

    solution.wall_time = time.time() - started
    logger.info(f"Solved {problem.label}: N={noise.N}, M={noise.M}, {solution.iterations} iterations, "
                f"{solution.patches} patches per axis, {solution.wall_time:.2f}s")
    return solution


def adaptedness_error(problem: SpdeProblem, noise: NoiseSample, x: Sequence[float]) -> float:
    """Change of u(x) when every noise cell not below x is zeroed."""
    full = sweep_solve(problem, noise)
    mask = FiltrationMask.of(IndexSet.full(noise.d), x)
    cut = sweep_solve(problem, noise.masked(mask))
    return float(np.max(np.abs(full.at(x) - cut.at(x))))


# studies ------------------------------------------------------------------------------


@dataclass
class MeshStudy:
    levels: List[int]
    errors: List[float]
    fit: Optional[RateFit]

    def rows(self) -> List[dict]:
        return [{"N": n, "l2_difference_to_2N": e} for n, e in zip(self.levels, self.errors)]


def mesh_convergence_study(problem: SpdeProblem, levels: Sequence[int], noise: NoiseSample) -> MeshStudy:
    """
    Self-convergence of the left-point solution with coupled noise.

    problem and noise live at the finest level; coarser levels aggregate the noise
    cells and subsample Z and f, so u_N and u_2N see the same noise.
    """
    levels = sorted(int(n) for n in levels)
    if levels[-1] != noise.N or problem.N != noise.N:
        raise InvalidArgumentError(f"Finest level {levels[-1]} must match the noise and problem grid {noise.N}")
    solutions = {}
    for n in levels:
        factor = noise.N // n
        solutions[n] = sweep_solve(problem.coarsen(factor), noise.coarsen(factor))
    errors = []
    for coarse, fine in zip(levels, levels[1:]):
        a = solutions[coarse].data
        b = solutions[fine].coarsen(fine // coarse).data
        errors.append(float(np.sqrt(np.mean((a - b) ** 2))))
    try:
        fit = fit_rate([problem.T / n for n in levels[:-1]], errors)
    except InvalidArgumentError:
        fit = None
        logger.info("Mesh study differences vanish or are too few for a rate fit")
    return MeshStudy(levels[:-1], errors, fit)


def regularity_report(solution: SpdeSolution, problem: SpdeProblem, noise: Optional[NoiseSample] = None,
                      m: float = 2.0, seed: int = 0, resamples: Optional[int] = None,
                      tolerance: float = 0.1) -> Dict[str, object]:
    """
    Seminorm table of u at the declared (alpha, delta) with per-axis fitted exponents.

    Conditioned entries are estimated only when the noise is passed; they re-solve the
    equation on every resample.
    """
    context = None
    if noise is not None:
        context = ConditioningContext(noise, rebuild=lambda nz: sweep_solve(problem, nz), resamples=resamples)
    table: SeminormTable = stochastic_seminorms(solution.u, problem.alpha, problem.delta, m, context, seed=seed)
    exponents = []
    for i in range(problem.d):
        entry = table.entry([i + 1])
        exponents.append(entry.fit.slope if entry.fit is not None else float("nan"))
    passed = all(np.isfinite(e) and e >= a - tolerance for e, a in zip(exponents, problem.alpha))
    return {"table": table, "exponents": exponents, "passed": passed}


def goursat_solution(c: float, v0: float, N: int, T: float) -> GridField:
    """u = v0 I_0(2 sqrt(c x1 x2)) solves d1 d2 u = c u with u = v0 on the axes."""
    corners = corner_grid(N, T, 2)
    prod = corners[..., 0] * corners[..., 1]
    values = v0 * iv(0, 2.0 * np.sqrt(c * prod))
    return GridField(values[None, ...], T, FieldKind.CORNER_VALUES, label="goursat")


def linear_young_problem(c: float, v0: float, N: int, T: float) -> SpdeProblem:
    """sigma = 0, f = c and Z(x) = x1 x2: the Goursat problem d1 d2 u = c u."""
    driver = deterministic_driver("smooth_poly", N, T, 2)
    return SpdeProblem(driver, constant_field(c, N, T, 2, label="f"), SIGMAS["zero"][0], 0.0, boundary=v0,
                       alpha=(0.45, 0.45), beta=(1.0, 1.0), delta=(0.5, 0.5), override=True, label="linear_young")
