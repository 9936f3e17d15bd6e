from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid
from scipy.interpolate import RegularGridInterpolator

DAYS_PER_YEAR = 365.0


# ---------- Grids ----------


@dataclass(frozen=True)
class SpatialGrid2D:
    """Uniform grid over [z_min, z_max] x [r_min, r_max] (log-price, rescaled rate)."""

    z_min: float
    z_max: float
    r_min: float
    r_max: float
    n_z: int
    n_r: int

    def __post_init__(self) -> None:
        if self.n_z < 3 or self.n_r < 3:
            raise ValueError(f"grid needs at least 3 nodes per axis, got {self.n_z}x{self.n_r}")
        if not self.z_max > self.z_min:
            raise ValueError(f"z_max must exceed z_min ({self.z_min}, {self.z_max})")
        if not self.r_max > self.r_min:
            raise ValueError(f"r_max must exceed r_min ({self.r_min}, {self.r_max})")

    @property
    def h_z(self) -> float:
        return (self.z_max - self.z_min) / (self.n_z - 1)

    @property
    def h_r(self) -> float:
        return (self.r_max - self.r_min) / (self.n_r - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_z, self.n_r)

    @property
    def size(self) -> int:
        return self.n_z * self.n_r

    @property
    def z(self) -> np.ndarray:
        return np.linspace(self.z_min, self.z_max, self.n_z)

    @property
    def r(self) -> np.ndarray:
        return np.linspace(self.r_min, self.r_max, self.n_r)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.z, self.r, indexing="ij")

    def resized(self, n_z: int, n_r: int) -> SpatialGrid2D:
        return SpatialGrid2D(self.z_min, self.z_max, self.r_min, self.r_max, n_z, n_r)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time nodes t_k = k*dt with the maturity nodes marked."""

    dt: float
    n_steps: int
    maturity_indices: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if self.dt <= 0 or self.n_steps < 1:
            raise ValueError(f"invalid time grid dt={self.dt} n_steps={self.n_steps}")
        bad = [k for k in self.maturity_indices if not 0 < k <= self.n_steps]
        if bad:
            raise ValueError(f"maturity indices outside (0, N]: {sorted(bad)}")

    @classmethod
    def daily(cls, maturities_days: Sequence[float], horizon_days: float | None = None, steps_per_day: int = 1) -> TimeGrid:
        """Daily nodes (1/365 years by default) covering every maturity."""
        horizon = max(maturities_days, default=0.0) if horizon_days is None else horizon_days
        if horizon <= 0:
            raise ValueError("time horizon must be positive")
        indices = set()
        for days in maturities_days:
            k = days * steps_per_day
            if abs(k - round(k)) > 1e-9:
                raise ValueError(f"maturity {days}d does not fall on a time node")
            indices.add(int(round(k)))
        n_steps = int(round(horizon * steps_per_day))
        if abs(horizon * steps_per_day - n_steps) > 1e-9:
            raise ValueError(f"horizon {horizon}d does not fall on a time node")
        return cls(1.0 / (DAYS_PER_YEAR * steps_per_day), n_steps, frozenset(indices))

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    def index_of(self, t: float) -> int:
        k = int(round(t / self.dt))
        if abs(k * self.dt - t) > 1e-9 * max(1.0, t) or not 0 <= k <= self.n_steps:
            raise ValueError(f"time {t} is not a node of the grid")
        return k

    def is_maturity(self, k: int) -> bool:
        return k in self.maturity_indices


# ---------- Fields ----------


class Field2D:
    """Immutable nodal values on a SpatialGrid2D."""

    __slots__ = ("grid", "values")

    def __init__(self, grid: SpatialGrid2D, values: np.ndarray):
        arr = np.array(values, dtype=float)
        if arr.shape != grid.shape:
            raise ValueError(f"values of shape {arr.shape} do not match grid {grid.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("field values must be finite")
        arr.setflags(write=False)
        self.grid = grid
        self.values = arr

    @classmethod
    def from_function(cls, grid: SpatialGrid2D, fn) -> Field2D:
        z, r = grid.mesh()
        return cls(grid, np.broadcast_to(fn(z, r), grid.shape))

    @classmethod
    def constant(cls, grid: SpatialGrid2D, value: float) -> Field2D:
        return cls(grid, np.full(grid.shape, value))

    def __add__(self, other: Field2D) -> Field2D:
        _check_same_grid(self, other)
        return Field2D(self.grid, self.values + other.values)

    def __mul__(self, scalar: float) -> Field2D:
        return Field2D(self.grid, self.values * scalar)

    __rmul__ = __mul__

    def interpolate(self, z: float | np.ndarray, r: float | np.ndarray) -> np.ndarray | float:
        """Bilinear interpolation; points outside the grid are clamped to its hull."""
        return bilinear(self.grid, self.values, z, r)

    def to_frame(self) -> pd.DataFrame:
        z, r = self.grid.mesh()
        return pd.DataFrame({"z": z.ravel(), "r": r.ravel(), "value": self.values.ravel()})

    def to_csv(self, path: str | Path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, grid: SpatialGrid2D, path: str | Path) -> Field2D:
        frame = pd.read_csv(path, float_precision="round_trip")
        if len(frame) != grid.size:
            raise ValueError(f"{path}: {len(frame)} rows for a grid of {grid.size} nodes")
        frame = frame.sort_values(["z", "r"], kind="mergesort")
        return cls(grid, frame["value"].to_numpy().reshape(grid.shape))


def _check_same_grid(a: Field2D, b: Field2D) -> None:
    if a.grid != b.grid:
        raise ValueError("fields live on different grids")


def bilinear(grid: SpatialGrid2D, values: np.ndarray, z, r):
    interp = RegularGridInterpolator((grid.z, grid.r), values, method="linear")
    zc, rc = np.broadcast_arrays(np.clip(z, grid.z_min, grid.z_max), np.clip(r, grid.r_min, grid.r_max))
    out = interp(np.stack([zc.ravel(), rc.ravel()], axis=-1)).reshape(zc.shape)
    # scalar queries come back as plain floats
    return float(out) if out.ndim == 0 else out


# ---------- Differencing and quadrature ----------


class Derivatives(NamedTuple):
    f_z: np.ndarray
    f_r: np.ndarray
    f_zz: np.ndarray
    f_rr: np.ndarray
    f_zr: np.ndarray


def _second_difference(values: np.ndarray, h: float, axis: int) -> np.ndarray:
    v = np.moveaxis(values, axis, 0)
    out = np.empty_like(v)
    out[1:-1] = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / h**2
    if v.shape[0] >= 4:
        out[0] = (2.0 * v[0] - 5.0 * v[1] + 4.0 * v[2] - v[3]) / h**2
        out[-1] = (2.0 * v[-1] - 5.0 * v[-2] + 4.0 * v[-3] - v[-4]) / h**2
    else:
        out[0] = out[1]
        out[-1] = out[-2]
    return np.moveaxis(out, 0, axis)


def difference_arrays(values: np.ndarray, h_z: float, h_r: float) -> Derivatives:
    """Second-order differences of a raw nodal array (central inside, one-sided on the edge)."""
    f_z = np.gradient(values, h_z, axis=0, edge_order=2)
    f_r = np.gradient(values, h_r, axis=1, edge_order=2)
    f_zr = np.gradient(f_z, h_r, axis=1, edge_order=2)
    return Derivatives(f_z, f_r, _second_difference(values, h_z, 0), _second_difference(values, h_r, 1), f_zr)


def central_diffs(f: Field2D) -> tuple[Field2D, Field2D, Field2D, Field2D, Field2D]:
    if not np.all(np.isfinite(f.values)):
        raise ValueError("cannot difference a field with non-finite values")
    d = difference_arrays(f.values, f.grid.h_z, f.grid.h_r)
    return tuple(Field2D(f.grid, arr) for arr in d)  # type: ignore[return-value]


def integrate_against(f: Field2D, density: Field2D) -> float:
    """Trapezoidal approximation of the double integral of f * density."""
    _check_same_grid(f, density)
    grid = f.grid
    inner = trapezoid(f.values * density.values, grid.r, axis=1)
    return float(trapezoid(inner, grid.z))
