"""
Gaussian white noise, Brownian sheet and deterministic driver fields on dyadic grids,
with conditional expectations for the commuting filtration generated by the noise.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cholesky

from ..config import settings
from ..exceptions import InvalidArgumentError, ResourceLimitError, UnsupportedOperationError
from ..models.grid_field import DeclaredClass, FieldKind, GridField, is_power_of_two
from .increments import IndexSet

logger = logging.getLogger(__name__)

_MASK_EPS = 1e-9

Functional = Callable[["NoiseSample"], np.ndarray]


def _sample_generator(key, sample: int) -> np.random.Generator:
    """Counter-based stream for one Monte Carlo sample; independent of scheduling order."""
    return np.random.Generator(np.random.Philox(key=key).jumped(sample + 1))


def _check_memory(M: int, N: int, d: int) -> None:
    estimate = 8 * M * N ** d
    if estimate > settings.max_field_bytes:
        raise ResourceLimitError(
            f"Noise field of {M} samples on {N}^{d} cells needs {estimate / 1024 ** 2:.1f}MB, "
            f"cap is {settings.max_field_bytes / 1024 ** 2:.1f}MB"
        )


def _fill(out: np.ndarray, key, samples: range, scale: float) -> None:
    cells = out.shape[1:]
    for m in samples:
        out[m] = _sample_generator(key, m).standard_normal(cells) * scale


def _parallel_fill(out: np.ndarray, key, scale: float, threads: Optional[int]) -> None:
    M = out.shape[0]
    threads = max(1, min(threads or settings.threads, M))
    if threads == 1:
        _fill(out, key, range(M), scale)
        return
    bounds = np.linspace(0, M, threads + 1).astype(int)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(_fill, out, key, range(bounds[i], bounds[i + 1]), scale) for i in range(threads)]
        for future in futures:
            future.result()


@dataclass(frozen=True)
class FiltrationMask:
    """
    Cells generating F^eta_x: for every i in eta the i-th cell interval lies below x_i.

    An empty eta selects every cell (no information is integrated out).
    """

    eta: IndexSet
    x: Tuple[float, ...]

    @classmethod
    def of(cls, eta: IndexSet, x: Sequence[float]) -> "FiltrationMask":
        if len(x) != eta.d:
            raise InvalidArgumentError(f"Threshold of dimension {len(x)} for d={eta.d}")
        return cls(eta, tuple(float(v) for v in x))

    def axis_masks(self, N: int, T: float) -> Tuple[np.ndarray, ...]:
        h = T / N
        upper = np.arange(1, N + 1)
        masks = []
        for i in range(self.eta.d):
            if (i + 1) in self.eta:
                masks.append(upper <= np.floor(self.x[i] / h + _MASK_EPS))
            else:
                masks.append(np.ones(N, dtype=bool))
        return tuple(masks)

    def cell_mask(self, N: int, T: float) -> np.ndarray:
        out = np.ones((), dtype=bool)
        for m in self.axis_masks(N, T):
            out = np.logical_and.outer(out, m)
        return out

    def then(self, other: "FiltrationMask", N: int, T: float) -> np.ndarray:
        return self.cell_mask(N, T) & other.cell_mask(N, T)


@dataclass(frozen=True, eq=False)
class NoiseSample:
    """White-noise cell masses with per-cell variance equal to the cell volume."""

    field: GridField
    seed: int

    @property
    def N(self) -> int:
        return self.field.N

    @property
    def T(self) -> float:
        return self.field.T

    @property
    def d(self) -> int:
        return self.field.d

    @property
    def M(self) -> int:
        return self.field.M

    @property
    def data(self) -> np.ndarray:
        return self.field.data

    def with_data(self, data: np.ndarray) -> "NoiseSample":
        return NoiseSample(self.field.with_data(data), self.seed)

    def coarsen(self, factor: int) -> "NoiseSample":
        return NoiseSample(self.field.coarsen(factor), self.seed)

    def masked(self, mask: FiltrationMask | np.ndarray) -> "NoiseSample":
        """Exact conditioning of a noise-linear quantity: cells outside the mask are zeroed."""
        cells = mask.cell_mask(self.N, self.T) if isinstance(mask, FiltrationMask) else mask
        return self.with_data(np.where(cells, self.data, 0.0))

    def resampled(self, mask: FiltrationMask | np.ndarray, k: int) -> "NoiseSample":
        """Cells outside the mask replaced by the k-th independent resample."""
        cells = mask.cell_mask(self.N, self.T) if isinstance(mask, FiltrationMask) else mask
        fresh = np.empty_like(self.data)
        _fill(fresh, (self.seed, k + 1), range(self.M), np.sqrt(self.field.h ** self.d))
        return self.with_data(np.where(cells, self.data, fresh))

    def pair_indicator(self, s: Sequence[float], t: Sequence[float]) -> np.ndarray:
        """xi(1_{(s,t]}) for grid-aligned s <= t."""
        h = self.field.h
        lo = [int(round(v / h)) for v in s]
        hi = [int(round(v / h)) for v in t]
        index = (slice(None),) + tuple(slice(a, b) for a, b in zip(lo, hi))
        return self.data[index].sum(axis=tuple(range(1, self.d + 1)))


def sample_white_noise(N: int, T: float, d: int, M: int, seed: int, threads: Optional[int] = None) -> NoiseSample:
    """
    Sample M independent white-noise realizations on N^d cells of [0,T]^d.

    Args:
        N: cells per axis (power of two)
        T: domain size
        d: dimension
        M: Monte Carlo samples
        seed: 64-bit key of the counter-based generator
        threads: worker threads (output does not depend on it)
    """
    if not is_power_of_two(N):
        raise InvalidArgumentError(f"N must be a power of two, got {N}")
    if M < 1:
        raise InvalidArgumentError(f"M must be at least 1, got {M}")
    if d < 1 or d > settings.max_dimension:
        raise InvalidArgumentError(f"Dimension {d} outside 1..{settings.max_dimension}")
    if seed < 0 or seed >= 1 << 64:
        raise InvalidArgumentError(f"Seed must be an unsigned 64-bit integer, got {seed}")
    _check_memory(M, N, d)

    h = T / N
    data = np.empty((M,) + (N,) * d)
    _parallel_fill(data, int(seed), np.sqrt(h ** d), threads)
    logger.info(f"Sampled white noise: N={N}, d={d}, M={M}, seed={seed}")
    field = GridField(data, T, FieldKind.CELL_DENSITY, seed=seed, adapted=True,
                      declared=DeclaredClass((-0.5,) * d, (float("inf"),) * d), label="xi")
    return NoiseSample(field, int(seed))


def brownian_sheet(noise: NoiseSample) -> GridField:
    """Cumulative sums of the noise cells; zero on the faces through the origin."""
    field = noise.field.cumulative(declared=DeclaredClass((0.5,) * noise.d, (float("inf"),) * noise.d),
                                   label="B")
    return field


class DriverKind(str, Enum):
    SMOOTH_POLY = "smooth_poly"
    TRIG = "trig"
    FROZEN_FBM_SHEET = "frozen_fbm_sheet"


def fbm_cholesky_factor(N: int, T: float, H: float) -> np.ndarray:
    """Lower Cholesky factor of the fBm covariance at the grid times h, 2h, ..., T."""
    times = np.arange(1, N + 1) * (T / N)
    s, t = np.meshgrid(times, times, indexing="ij")
    cov = 0.5 * (s ** (2 * H) + t ** (2 * H) - np.abs(t - s) ** (2 * H))
    try:
        return cholesky(cov, lower=True)
    except LinAlgError:
        logger.warning("fBm covariance not numerically positive definite, adding jitter")
        return cholesky(cov + 1e-12 * np.eye(N), lower=True)


def deterministic_driver(kind: DriverKind | str, N: int, T: float, d: int, H: Optional[float] = None) -> GridField:
    """
    Deterministic corner field used as the Young driver Z.

    smooth_poly is prod_i x_i, trig is prod_i sin(pi x_i / T) and frozen_fbm_sheet
    is one fixed realization of the separable fractional Brownian sheet.
    """
    kind = DriverKind(kind)
    if not is_power_of_two(N):
        raise InvalidArgumentError(f"N must be a power of two, got {N}")
    axis = np.arange(N + 1) * (T / N)

    if kind == DriverKind.SMOOTH_POLY:
        factors = [axis] * d
        declared = DeclaredClass((1.0,) * d, (0.0,) * d, float("inf"))
    elif kind == DriverKind.TRIG:
        factors = [np.sin(np.pi * axis / T)] * d
        declared = DeclaredClass((1.0,) * d, (0.0,) * d, float("inf"))
    else:
        if H is None or not 0.5 < H < 1.0:
            raise InvalidArgumentError(f"Hurst index must lie in (1/2, 1), got {H}")
        if N > settings.fbm_cholesky_cap:
            raise ResourceLimitError(f"Cholesky fBm path capped at N={settings.fbm_cholesky_cap}, got {N}")
        return _frozen_fbm_sheet(N, T, d, H)

    values = np.ones(())
    for f in factors:
        values = np.multiply.outer(values, f)
    return GridField(values[None, ...], T, FieldKind.CORNER_VALUES, adapted=True, declared=declared,
                     label=kind.value)


def _frozen_fbm_sheet(N: int, T: float, d: int, H: float) -> GridField:
    L = fbm_cholesky_factor(N, T, H)
    rng = np.random.Generator(np.random.Philox(key=settings.fbm_seed))
    values = rng.standard_normal((N,) * d)
    for i in range(d):
        values = np.moveaxis(np.tensordot(L, values, axes=([1], [i])), 0, i)
    out = np.zeros((N + 1,) * d)
    out[(slice(1, None),) * d] = values
    logger.debug(f"Generated frozen fBm sheet: N={N}, d={d}, H={H}")
    return GridField(out[None, ...], T, FieldKind.CORNER_VALUES, adapted=True,
                     declared=DeclaredClass((H,) * d, (0.0,) * d, float("inf")),
                     label=f"fbm_sheet_H{H}")


def conditional_expectation(functional: Optional[Functional], mask: FiltrationMask | np.ndarray,
                            noise: NoiseSample, K: Optional[int] = None, linear: bool = False) -> np.ndarray:
    """
    Per-sample estimate of E[Z | cells in mask] for Z = functional(noise).

    Args:
        functional: re-evaluable map from a noise sample to per-sample values (M,)
        mask: filtration mask or boolean cell array of the retained cells
        noise: the noise the functional is built on
        K: resample count for nonlinear functionals
        linear: exact mode; the functional is linear in the noise cells
    """
    if functional is None:
        raise UnsupportedOperationError("Conditional expectation needs a re-evaluable functional of the noise")
    if linear:
        return np.asarray(functional(noise.masked(mask)), dtype=float)
    K = settings.resample_count if K is None else K
    if K < 1:
        raise InvalidArgumentError(f"Resample count must be positive, got {K}")
    total = None
    for k in range(K):
        value = np.asarray(functional(noise.resampled(mask, k)), dtype=float)
        total = value if total is None else total + value
    return total / K


def mean_with_se(values: np.ndarray) -> Tuple[float, float]:
    values = np.asarray(values, dtype=float)
    if values.shape[0] < 2:
        return float(values.mean()), float("nan")
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(values.shape[0]))


def variance_with_se(values: np.ndarray) -> Tuple[float, float]:
    """Sample variance and its standard error from the fourth central moment."""
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    if n < 2:
        raise InvalidArgumentError(f"A sample variance needs at least 2 values, got {n}")
    centred = values - values.mean()
    var = float(np.dot(centred, centred) / (n - 1))
    m4 = float(np.mean(centred ** 4))
    se = float(np.sqrt(max(m4 - var ** 2, 0.0) / n))
    return var, se
