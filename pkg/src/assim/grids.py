"""Low-dimensional density grids and distances between them.

Grids exist to provide brute-force reference answers (distribution distances,
posterior cross-checks) in one to three dimensions; they are deliberately not
a general integration facility. Integrals use the trapezoid rule along each
axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

MAX_GRID_DIM = 3


@dataclass(frozen=True)
class DensityGrid:
    """Nonnegative function tabulated on a rectangular grid (d <= 3)."""

    axes: tuple
    values: np.ndarray

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        values = np.asarray(self.values, dtype=float)
        if not 1 <= len(axes) <= MAX_GRID_DIM:
            raise ValueError(f"grid dimension must be 1..{MAX_GRID_DIM}, got {len(axes)}")
        for a in axes:
            if a.ndim != 1 or a.size < 2 or np.any(np.diff(a) <= 0):
                raise ValueError("each axis must be a strictly increasing 1-D array")
        if values.shape != tuple(a.size for a in axes):
            raise ValueError(
                f"values shape {values.shape} does not match axes "
                f"{tuple(a.size for a in axes)}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("non-finite grid values")
        if np.any(values < 0):
            raise ValueError("density values must be nonnegative")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_function(cls, axes, fn: Callable[[np.ndarray], np.ndarray],
                      normalize: bool = False) -> "DensityGrid":
        """Tabulate ``fn`` over the mesh; ``fn`` maps (..., d) points to values."""
        axes = tuple(np.asarray(a, dtype=float) for a in axes)
        mesh = np.meshgrid(*axes, indexing="ij")
        points = np.stack(mesh, axis=-1)
        grid = cls(axes, np.asarray(fn(points), dtype=float))
        return grid.normalized() if normalize else grid

    def integral(self) -> float:
        total = self.values
        for axis in reversed(self.axes):
            total = np.trapezoid(total, x=axis, axis=-1)
        return float(total)

    def normalized(self) -> "DensityGrid":
        z = self.integral()
        if z <= 0:
            raise ValueError("cannot normalize a grid with nonpositive mass")
        return DensityGrid(self.axes, self.values / z)


def _check_compatible(f: DensityGrid, g: DensityGrid, tol: float = 1e-2):
    if len(f.axes) != len(g.axes) or any(
        a.shape != b.shape or not np.array_equal(a, b)
        for a, b in zip(f.axes, g.axes)
    ):
        raise ValueError("grids must share identical axes")
    for grid, name in ((f, "first"), (g, "second")):
        mass = grid.integral()
        if abs(mass - 1.0) > tol:
            raise ValueError(
                f"{name} grid integrates to {mass:.6f}; normalize before comparing"
            )


def tv_distance_grid(f: DensityGrid, g: DensityGrid) -> float:
    """Total variation distance: half the integral of |f - g|."""
    _check_compatible(f, g)
    return 0.5 * DensityGrid(f.axes, np.abs(f.values - g.values)).integral()


def hellinger_distance_grid(f: DensityGrid, g: DensityGrid) -> float:
    """Hellinger distance: sqrt of half the integral of (sqrt f - sqrt g)^2."""
    _check_compatible(f, g)
    gap = np.sqrt(f.values) - np.sqrt(g.values)
    return float(np.sqrt(0.5 * DensityGrid(f.axes, gap * gap).integral()))
