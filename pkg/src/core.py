"""Output grid, fairness constraint specs and dual multiplier containers"""
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from src.errors import SpecValidationError
from src.utils import logger

GroupId = str


class Variant(str, Enum):
    LZ = "lz"
    ZDP = "zdp"
    BORDER = "border"


@dataclass(frozen=True)
class Grid:
    """Regular grid Y_K of K points on [-A, A]."""

    A: float
    K: int
    points: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.A > 0 or not math.isfinite(self.A):
            raise SpecValidationError(f"Grid bound A must be positive and finite, got {self.A}")
        if int(self.K) != self.K or self.K < 2:
            raise SpecValidationError(f"Grid size K must be an integer >= 2, got {self.K}")
        # linspace pins both endpoints exactly at -A and A
        points = np.linspace(-self.A, self.A, int(self.K))
        points.setflags(write=False)
        object.__setattr__(self, "K", int(self.K))
        object.__setattr__(self, "A", float(self.A))
        object.__setattr__(self, "points", points)

    @property
    def spacing(self) -> float:
        return 2.0 * self.A / (self.K - 1)

    def contains(self, value: float, atol: float = 1e-12) -> bool:
        idx = int(np.argmin(np.abs(self.points - value)))
        return abs(self.points[idx] - value) <= atol * max(1.0, self.A)


def build_grid(A: float, K: int) -> Grid:
    return Grid(A=A, K=K)


def auto_grid_size(n: int) -> int:
    """K = N^(1/3) rounded up to the next odd integer, so that 0 is a grid point."""
    if n < 1:
        raise SpecValidationError(f"Automatic grid size needs a positive sample count, got {n}")
    k = max(3, math.ceil(round(n ** (1.0 / 3.0), 9)))
    return k if k % 2 == 1 else k + 1


def _strictly_increasing(values: Sequence[float]) -> bool:
    return all(a < b for a, b in zip(values, values[1:]))


@dataclass(frozen=True)
class FairnessSpec:
    """One of the three constraint families.

    lz:     P_s(f <= z_m) = l_m for every group and threshold.
    zdp:    P_s(f <= z_m) = P(f <= z_m) for every group and threshold.
    border: level constraints at the borders (z_1, z_2) plus parity at an
            inner regular grid of ``inner_m`` thresholds strictly inside.
    """

    variant: Variant
    thresholds: Tuple[float, ...]
    levels: Tuple[float, ...] = ()
    inner_m: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "thresholds", tuple(float(z) for z in self.thresholds))
        object.__setattr__(self, "levels", tuple(float(v) for v in self.levels))

        if not self.thresholds:
            raise SpecValidationError("At least one threshold is required")
        if not all(math.isfinite(z) for z in self.thresholds):
            raise SpecValidationError(f"Thresholds must be finite, got {self.thresholds}")
        if not _strictly_increasing(self.thresholds):
            raise SpecValidationError(f"Thresholds must be strictly increasing, got {self.thresholds}")

        if self.variant is Variant.ZDP:
            if self.levels:
                raise SpecValidationError("A zdp spec takes thresholds only")
            return

        if len(self.levels) != len(self.thresholds):
            raise SpecValidationError(
                f"Got {len(self.levels)} levels for {len(self.thresholds)} thresholds"
            )
        if not all(0.0 < v < 1.0 for v in self.levels) or not _strictly_increasing(self.levels):
            raise SpecValidationError(f"Levels must lie in (0, 1) and strictly increase, got {self.levels}")

        if self.variant is Variant.BORDER:
            if len(self.thresholds) != 2:
                raise SpecValidationError("A border spec takes exactly two borders (z_1, z_2)")
            if int(self.inner_m) != self.inner_m or self.inner_m < 1:
                raise SpecValidationError(f"Inner grid size must be a positive integer, got {self.inner_m}")
            object.__setattr__(self, "inner_m", int(self.inner_m))

    @classmethod
    def lz(cls, levels: Sequence[float], thresholds: Sequence[float]) -> "FairnessSpec":
        return cls(Variant.LZ, tuple(thresholds), tuple(levels))

    @classmethod
    def zdp(cls, thresholds: Sequence[float]) -> "FairnessSpec":
        return cls(Variant.ZDP, tuple(thresholds))

    @classmethod
    def border(cls, borders: Sequence[float], levels: Sequence[float], inner_m: int) -> "FairnessSpec":
        return cls(Variant.BORDER, tuple(borders), tuple(levels), inner_m)

    @property
    def inner_thresholds(self) -> Tuple[float, ...]:
        if self.variant is not Variant.BORDER:
            return ()
        z1, z2 = self.thresholds
        width = (z2 - z1) / (self.inner_m + 1)
        return tuple(z1 + m * width for m in range(1, self.inner_m + 1))

    @property
    def constraint_thresholds(self) -> np.ndarray:
        """All thresholds in dual column order (level columns first)."""
        return np.asarray(self.thresholds + self.inner_thresholds, dtype=float)

    @property
    def n_level_columns(self) -> int:
        if self.variant is Variant.ZDP:
            return 0
        return len(self.thresholds)

    @property
    def n_columns(self) -> int:
        return len(self.thresholds) + len(self.inner_thresholds)

    @property
    def targets(self) -> np.ndarray:
        """Level of each level column; 0 for parity columns, whose target is the pooled CDF."""
        targets = np.zeros(self.n_columns)
        targets[: self.n_level_columns] = self.levels[: self.n_level_columns]
        return targets

    def check_grid(self, grid: Grid):
        """Thresholds outside [-A, A] are an error; thresholds off the grid only warn."""
        thresholds = self.constraint_thresholds
        if np.any(np.abs(thresholds) > grid.A):
            raise SpecValidationError(f"Thresholds {thresholds.tolist()} fall outside [-{grid.A}, {grid.A}]")
        off_grid = [z for z in self.thresholds if not grid.contains(z)]
        if off_grid:
            logger.warning(f"Thresholds not on the grid (K={grid.K}): {off_grid}")

    def to_dict(self) -> Dict:
        return {
            "variant": self.variant.value,
            "thresholds": list(self.thresholds),
            "levels": list(self.levels),
            "inner_m": self.inner_m,
        }

    @classmethod
    def from_dict(cls, payload: Dict) -> "FairnessSpec":
        try:
            variant = Variant(payload["variant"])
            thresholds = tuple(float(z) for z in payload["thresholds"])
            levels = tuple(float(level) for level in payload.get("levels", ()))
            inner_m = int(payload.get("inner_m", 0))
        except (KeyError, TypeError, ValueError) as e:
            raise SpecValidationError(f"Malformed fairness spec {payload!r}: {e!r}") from e
        return cls(variant, thresholds, levels, inner_m)


def indicator_vector(y: float, thresholds: Sequence[float]) -> np.ndarray:
    """a(y) = (1{y <= z_1}, ..., 1{y <= z_M})."""
    return (y <= np.asarray(thresholds, dtype=float)).astype(int)


def indicator_matrix(values: np.ndarray, thresholds: Sequence[float]) -> np.ndarray:
    return np.asarray(values, dtype=float)[:, None] <= np.asarray(thresholds, dtype=float)[None, :]


def centered_indicator(y: float, thresholds: Sequence[float], levels: Sequence[float]) -> np.ndarray:
    """b(y) = a(y) - l."""
    if len(thresholds) != len(levels):
        raise SpecValidationError(f"Got {len(levels)} levels for {len(thresholds)} thresholds")
    return indicator_vector(y, thresholds) - np.asarray(levels, dtype=float)


def snap_indices(values: np.ndarray, grid: Grid) -> np.ndarray:
    """Index of the nearest grid point; exact midpoints go to the smaller point."""
    values = np.asarray(values, dtype=float)
    if np.any(np.abs(values) > grid.A) or not np.all(np.isfinite(values)):
        raise SpecValidationError(f"Values must be clipped to [-{grid.A}, {grid.A}] before snapping")
    points = grid.points
    lower = np.clip(np.searchsorted(points, values, side="right") - 1, 0, grid.K - 2)
    upper = lower + 1
    go_up = (points[upper] - values) < (values - points[lower])
    return np.where(go_up, upper, lower)


def snap_many(values: np.ndarray, grid: Grid) -> np.ndarray:
    return grid.points[snap_indices(values, grid)]


def snap_to_grid(y: float, grid: Grid) -> float:
    return float(snap_many(np.array([y]), grid)[0])


@dataclass(frozen=True)
class DualParams:
    """Multipliers lambda, one row per group (sorted labels), one column per constraint.

    The first ``n_level_columns`` columns are unconstrained; the remaining
    parity columns live in Delta_M (zero sum across groups).
    """

    groups: Tuple[GroupId, ...]
    matrix: np.ndarray
    n_level_columns: int

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != len(self.groups):
            raise SpecValidationError(
                f"Multiplier matrix of shape {matrix.shape} does not match {len(self.groups)} groups"
            )
        if not 0 <= self.n_level_columns <= matrix.shape[1]:
            raise SpecValidationError(f"Invalid level column count {self.n_level_columns}")
        matrix.setflags(write=False)
        object.__setattr__(self, "groups", tuple(self.groups))
        object.__setattr__(self, "matrix", matrix)

    @classmethod
    def zeros(cls, groups: Sequence[GroupId], spec: FairnessSpec) -> "DualParams":
        return cls(tuple(groups), np.zeros((len(groups), spec.n_columns)), spec.n_level_columns)

    @property
    def level_block(self) -> np.ndarray:
        return self.matrix[:, : self.n_level_columns]

    @property
    def parity_block(self) -> np.ndarray:
        return self.matrix[:, self.n_level_columns:]

    def row(self, group: GroupId) -> np.ndarray:
        return self.matrix[self.groups.index(group)]

    def with_matrix(self, matrix: np.ndarray) -> "DualParams":
        return DualParams(self.groups, matrix, self.n_level_columns)

    def check_compatible(self, groups: Sequence[GroupId], spec: FairnessSpec):
        if tuple(groups) != self.groups:
            raise SpecValidationError(f"Multipliers cover groups {self.groups}, expected {tuple(groups)}")
        if self.matrix.shape[1] != spec.n_columns or self.n_level_columns != spec.n_level_columns:
            raise SpecValidationError(
                f"Multipliers have {self.matrix.shape[1]} columns, spec needs {spec.n_columns}"
            )

    def column_sums(self) -> np.ndarray:
        return self.matrix.sum(axis=0)


def sorted_groups(groups: Sequence[GroupId], declared: Optional[Sequence[GroupId]] = None) -> Tuple[GroupId, ...]:
    labels = set(str(g) for g in groups)
    if declared is not None:
        labels |= set(str(g) for g in declared)
    return tuple(sorted(labels))
