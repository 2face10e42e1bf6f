"""Bird's-eye-view grid geometry and the per-cell flow container."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidShape


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned BeV region split into square cells.

    Rows index y and columns index x; cell (row, col) covers the half-open
    box [x_min + col*res, x_min + (col+1)*res) x [y_min + row*res, ...).
    """

    x_min: float = -50.0
    x_max: float = 50.0
    y_min: float = -50.0
    y_max: float = 50.0
    resolution: float = 0.25

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("empty region of interest")

    @property
    def H(self) -> int:
        return int(round((self.y_max - self.y_min) / self.resolution))

    @property
    def W(self) -> int:
        return int(round((self.x_max - self.x_min) / self.resolution))

    @property
    def shape(self) -> tuple[int, int]:
        return self.H, self.W

    def cell_index(self, x, y):
        """Return (rows, cols, inside) for coordinates; rows/cols are only meaningful where inside."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        cols = np.floor((x - self.x_min) / self.resolution).astype(np.int64)
        rows = np.floor((y - self.y_min) / self.resolution).astype(np.int64)
        inside = (
            (x >= self.x_min) & (x < self.x_max) & (y >= self.y_min) & (y < self.y_max)
            & (rows >= 0) & (rows < self.H) & (cols >= 0) & (cols < self.W)
        )
        return rows, cols, inside

    def cell_center(self, rows, cols):
        rows = np.asarray(rows, dtype=np.float64)
        cols = np.asarray(cols, dtype=np.float64)
        return (self.x_min + (cols + 0.5) * self.resolution,
                self.y_min + (rows + 0.5) * self.resolution)

    def cell_centers(self):
        """(H, W) arrays of cell-center x and y."""
        rows, cols = np.mgrid[0:self.H, 0:self.W]
        return self.cell_center(rows, cols)


@dataclass
class FlowGrid:
    """Per-cell BeV velocity in m/s (east, north) with a validity mask."""

    values: np.ndarray
    valid: np.ndarray
    dt: float = 0.1
    grid: GridSpec | None = field(default=None, compare=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.ndim != 3 or self.values.shape[2] != 2:
            raise InvalidShape(f"flow values must be HxWx2, got {self.values.shape}")
        if self.valid.shape != self.values.shape[:2]:
            raise InvalidShape("validity mask does not match flow shape")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("flow values must be finite")
        # invalid cells carry zero by contract
        self.values = np.where(self.valid[..., None], self.values, 0.0)

    @property
    def shape(self):
        return self.valid.shape

    @classmethod
    def zeros(cls, grid: GridSpec, dt: float = 0.1, valid: bool = True):
        H, W = grid.shape
        return cls(np.zeros((H, W, 2)), np.full((H, W), valid), dt=dt, grid=grid)

    def speed(self):
        return np.hypot(self.values[..., 0], self.values[..., 1])

    def __eq__(self, other):
        if not isinstance(other, FlowGrid):
            return NotImplemented
        return (self.dt == other.dt and np.array_equal(self.valid, other.valid)
                and np.array_equal(self.values, other.values))
