"""Sparse difference operators on the full (n_z * n_r) grid.

Nodes are flattened z-major: p = i * n_r + j. Operators built here carry the
second-order central stencil on interior rows and empty boundary rows; the
boundary is closed separately by freezing the one-sided second difference
normal to each face at its value on an anchor slice (the most recent maturity
or the terminal payoff). Corners freeze the sum of both normal differences.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from otcalib.grid import SpatialGrid2D


@lru_cache(maxsize=16)
def _interior(grid: SpatialGrid2D) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    i, j = np.meshgrid(np.arange(1, grid.n_z - 1), np.arange(1, grid.n_r - 1), indexing="ij")
    i, j = i.ravel(), j.ravel()
    return i * grid.n_r + j, i, j


@lru_cache(maxsize=16)
def interior_mask(grid: SpatialGrid2D) -> np.ndarray:
    mask = np.zeros(grid.shape, dtype=bool)
    mask[1:-1, 1:-1] = True
    mask.setflags(write=False)
    return mask


def _inner(coef, grid: SpatialGrid2D) -> np.ndarray:
    return np.broadcast_to(np.asarray(coef, dtype=float), grid.shape)[1:-1, 1:-1].ravel()


def assemble_operator(
    grid: SpatialGrid2D,
    *,
    drift_z=0.0,
    drift_r=0.0,
    diff_zz=0.0,
    diff_rr=0.0,
    cross=0.0,
    reaction=0.0,
) -> sp.csr_matrix:
    """Discrete drift_z d_z + drift_r d_r + diff_zz d_zz + diff_rr d_rr + cross d_zr + reaction."""
    p, _, _ = _interior(grid)
    n_r, hz, hr = grid.n_r, grid.h_z, grid.h_r
    dz, dr = _inner(drift_z, grid), _inner(drift_r, grid)
    azz, arr = _inner(diff_zz, grid), _inner(diff_rr, grid)
    c = _inner(cross, grid) / (4.0 * hz * hr)
    react = _inner(reaction, grid)

    offsets_and_values = [
        (0, -2.0 * azz / hz**2 - 2.0 * arr / hr**2 + react),
        (n_r, azz / hz**2 + dz / (2.0 * hz)),
        (-n_r, azz / hz**2 - dz / (2.0 * hz)),
        (1, arr / hr**2 + dr / (2.0 * hr)),
        (-1, arr / hr**2 - dr / (2.0 * hr)),
        (n_r + 1, c),
        (-n_r - 1, c),
        (n_r - 1, -c),
        (-n_r + 1, -c),
    ]
    rows = np.concatenate([p for _ in offsets_and_values])
    cols = np.concatenate([p + off for off, _ in offsets_and_values])
    vals = np.concatenate([v for _, v in offsets_and_values])
    return sp.csr_matrix((vals, (rows, cols)), shape=(grid.size, grid.size))


@lru_cache(maxsize=16)
def closure_matrix(grid: SpatialGrid2D) -> sp.csr_matrix:
    """Rows of the frozen-second-difference closure; zero on interior rows."""
    n_z, n_r = grid.shape

    def idx(i, j):
        return i * n_r + j

    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []

    def add(row: int, nodes: list[tuple[int, int]]) -> None:
        for (i, j), w in zip(nodes, (1.0, -2.0, 1.0)):
            rows.append(row)
            cols.append(idx(i, j))
            vals.append(w)

    for j in range(n_r):
        for i, step in ((0, 1), (n_z - 1, -1)):
            add(idx(i, j), [(i, j), (i + step, j), (i + 2 * step, j)])
    for i in range(n_z):
        for j, step in ((0, 1), (n_r - 1, -1)):
            add(idx(i, j), [(i, j), (i, j + step), (i, j + 2 * step)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(grid.size, grid.size))


def implicit_system(grid: SpatialGrid2D, operator: sp.csr_matrix, dt: float) -> sp.csc_matrix:
    """(I - dt L) on interior rows, closure rows on the boundary."""
    identity = sp.diags(interior_mask(grid).ravel().astype(float))
    return (identity - dt * operator + closure_matrix(grid)).tocsc()


def closure_rhs(grid: SpatialGrid2D, anchor: np.ndarray) -> np.ndarray:
    return closure_matrix(grid) @ anchor.ravel()

