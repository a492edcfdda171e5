"""
Monte Carlo ensembles of real values on a uniform dyadic grid over [0,T]^d.

Two layouts are used:
  cell_density   data shape (M, N, ..., N); entry = integrated mass of the cell
  corner_values  data shape (M, N+1, ..., N+1); entry = value at the grid corner
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from ..exceptions import InvalidArgumentError, UnsupportedOperationError

logger = logging.getLogger(__name__)

_GRID_EPS = 1e-9


class FieldKind(str, Enum):
    CELL_DENSITY = "cell_density"
    CORNER_VALUES = "corner_values"


@dataclass(frozen=True)
class DeclaredClass:
    """Advisory regularity label C^{alpha, delta} L_m."""

    alpha: Tuple[float, ...]
    delta: Tuple[float, ...]
    m: float = 2.0


def is_power_of_two(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@dataclass(frozen=True, eq=False)
class GridField:
    data: np.ndarray
    T: float
    kind: FieldKind
    seed: Optional[int] = None
    adapted: bool = True
    declared: Optional[DeclaredClass] = None
    label: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim < 2:
            raise InvalidArgumentError(f"Field data needs a sample axis and at least one grid axis, got {data.shape}")
        sides = set(data.shape[1:])
        if len(sides) != 1:
            raise InvalidArgumentError(f"Field grid must be square, got {data.shape[1:]}")
        side = sides.pop()
        cells = side if self.kind == FieldKind.CELL_DENSITY else side - 1
        if not is_power_of_two(cells):
            raise InvalidArgumentError(f"Cells per axis must be a power of two, got {cells}")
        if self.T <= 0:
            raise InvalidArgumentError(f"Domain size must be positive, got {self.T}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    # shape ------------------------------------------------------------------

    @property
    def M(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.ndim - 1

    @property
    def N(self) -> int:
        side = self.data.shape[1]
        return side if self.kind == FieldKind.CELL_DENSITY else side - 1

    @property
    def h(self) -> float:
        return self.T / self.N

    @property
    def deterministic(self) -> bool:
        return self.M == 1

    def with_data(self, data: np.ndarray, **changes) -> "GridField":
        return replace(self, data=data, **changes)

    def same_grid(self, other: "GridField") -> bool:
        return self.kind == other.kind and self.N == other.N and self.d == other.d and np.isclose(self.T, other.T)

    # corner lookups -----------------------------------------------------------

    def corner_index(self, points: np.ndarray) -> np.ndarray:
        """Lower-left grid corner of each point, clipped to the grid."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[-1] != self.d:
            raise InvalidArgumentError(f"Points of dimension {points.shape[-1]} for a {self.d}-d field")
        idx = np.floor(points / self.h + _GRID_EPS).astype(int)
        return np.clip(idx, 0, self.N)

    def at(self, points) -> np.ndarray:
        """Values at arbitrary points by the lower-left corner rule: (M,) or (M, K)."""
        self._require_corners("point evaluation")
        points = np.asarray(points, dtype=float)
        single = points.ndim == 1
        idx = self.corner_index(points)
        values = self.data[(slice(None),) + tuple(idx[:, i] for i in range(self.d))]
        return values[:, 0] if single else values

    def rect_increments(self, theta_axes: Tuple[int, ...], lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """
        Rectangular increments in the given axes for many boxes at once.

        Args:
            theta_axes: 0-based axes of the increment
            lo, hi: arrays (K, d) of corners

        Returns:
            array (M, K)
        """
        self._require_corners("rectangular increments")
        lo = np.atleast_2d(np.asarray(lo, dtype=float))
        hi = np.atleast_2d(np.asarray(hi, dtype=float))
        total = np.zeros((self.M, lo.shape[0]))
        n = len(theta_axes)
        for mask in range(1 << n):
            corner = lo.copy()
            flipped = 0
            for j, axis in enumerate(theta_axes):
                if mask >> j & 1:
                    corner[:, axis] = hi[:, axis]
                    flipped += 1
            sign = -1.0 if (n - flipped) % 2 else 1.0
            total += sign * self.at(corner)
        return total

    def cell_increments(self) -> np.ndarray:
        """Full mixed increment over every grid cell, shape (M, N, ..., N)."""
        self._require_corners("cell increments")
        out = self.data
        for axis in range(1, self.d + 1):
            out = np.diff(out, axis=axis)
        return out

    def lower_left(self) -> np.ndarray:
        """Corner values at the lower-left corner of every cell, shape (M, N, ..., N)."""
        self._require_corners("lower-left values")
        return self.data[(slice(None),) + (slice(0, self.N),) * self.d]

    # cell fields --------------------------------------------------------------

    def cumulative(self, **changes) -> "GridField":
        """Corner field of cumulative cell masses, zero on the faces through the origin."""
        self._require_cells("cumulative sums")
        out = np.zeros((self.M,) + (self.N + 1,) * self.d)
        acc = self.data
        for axis in range(1, self.d + 1):
            acc = np.cumsum(acc, axis=axis)
        out[(slice(None),) + (slice(1, None),) * self.d] = acc
        return GridField(out, self.T, FieldKind.CORNER_VALUES, seed=self.seed, adapted=self.adapted, **changes)

    def coarsen(self, factor: int) -> "GridField":
        """Aggregate cell masses or subsample corners by an integer factor."""
        if factor == 1:
            return self
        if not is_power_of_two(factor) or factor > self.N:
            raise InvalidArgumentError(f"Coarsening factor {factor} incompatible with N={self.N}")
        if self.kind == FieldKind.CORNER_VALUES:
            data = self.data[(slice(None),) + (slice(None, None, factor),) * self.d]
            return self.with_data(np.ascontiguousarray(data))
        coarse = self.N // factor
        shape = [self.M]
        for _ in range(self.d):
            shape += [coarse, factor]
        data = self.data.reshape(shape).sum(axis=tuple(range(2, 2 * self.d + 1, 2)))
        return self.with_data(data)

    def sample_slice(self, start: int, stop: int) -> "GridField":
        return self.with_data(self.data[start:stop])

    def _require_corners(self, what: str) -> None:
        if self.kind != FieldKind.CORNER_VALUES:
            raise UnsupportedOperationError(f"{what} needs a corner-valued field")

    def _require_cells(self, what: str) -> None:
        if self.kind != FieldKind.CELL_DENSITY:
            raise UnsupportedOperationError(f"{what} needs a cell-density field")

    # persistence --------------------------------------------------------------

    def header(self) -> dict:
        return {
            "N": self.N,
            "T": self.T,
            "d": self.d,
            "M": self.M,
            "kind": self.kind.value,
            "seed": self.seed,
            "adapted": self.adapted,
            "label": self.label,
            "dtype": "float64",
            "shape": list(self.data.shape),
        }

    def save(self, path: str | Path) -> Path:
        """Write the data as a flat little-endian float64 binary plus a JSON sidecar."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.data.astype("<f8").tofile(path)
        sidecar = path.with_suffix(path.suffix + ".json")
        sidecar.write_text(json.dumps(self.header(), indent=2), encoding="utf-8")
        logger.debug(f"Saved field {self.label or '<unnamed>'} to {path}")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "GridField":
        path = Path(path)
        header = json.loads(path.with_suffix(path.suffix + ".json").read_text(encoding="utf-8"))
        data = np.fromfile(path, dtype="<f8").reshape(header["shape"])
        return cls(
            data,
            float(header["T"]),
            FieldKind(header["kind"]),
            seed=header.get("seed"),
            adapted=header.get("adapted", True),
            label=header.get("label", ""),
        )


def corner_grid(N: int, T: float, d: int) -> np.ndarray:
    """All grid corners as an array (N+1, ..., N+1, d)."""
    axis = np.arange(N + 1) * (T / N)
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack(mesh, axis=-1)


def constant_field(value: float, N: int, T: float, d: int, M: int = 1, **kwargs) -> GridField:
    return GridField(np.full((M,) + (N + 1,) * d, float(value)), T, FieldKind.CORNER_VALUES, **kwargs)


def field_from_function(func, N: int, T: float, d: int, **kwargs) -> GridField:
    """Deterministic corner field from a vectorized function of points (..., d)."""
    values = np.asarray(func(corner_grid(N, T, d)), dtype=float)
    return GridField(values[None, ...], T, FieldKind.CORNER_VALUES, **kwargs)
