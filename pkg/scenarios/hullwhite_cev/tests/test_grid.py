"""Grids, fields, finite differences and quadrature."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Allow running directly (uv run scenarios/hullwhite_cev/tests/test_grid.py) without installing.
ROOT = Path(__file__).resolve().parents[3]
sys.path.insert(0, str(ROOT))
sys.path.insert(0, str(ROOT / "src"))

from otcalib.grid import (  # noqa: E402
    Field2D,
    SpatialGrid2D,
    TimeGrid,
    bilinear,
    central_diffs,
    integrate_against,
)

GRID = SpatialGrid2D(4.0, 5.0, 0.0, 5.0, 100, 100)


def test_grid_rejects_degenerate_axes():
    with pytest.raises(ValueError):
        SpatialGrid2D(4.0, 5.0, 0.0, 5.0, 2, 10)
    with pytest.raises(ValueError):
        SpatialGrid2D(5.0, 4.0, 0.0, 5.0, 10, 10)


def test_daily_time_grid_marks_maturities():
    tg = TimeGrid.daily([60, 120])
    assert tg.n_steps == 120
    assert tg.dt == pytest.approx(1 / 365)
    assert tg.maturity_indices == frozenset({60, 120})
    assert tg.index_of(60 / 365) == 60
    assert tg.is_maturity(120) and not tg.is_maturity(59)


def test_daily_time_grid_rejects_off_node_maturity():
    with pytest.raises(ValueError):
        TimeGrid.daily([60.5])
    assert TimeGrid.daily([60.5], steps_per_day=2).maturity_indices == frozenset({121})


def test_field_values_are_checked_and_frozen():
    with pytest.raises(ValueError):
        Field2D(GRID, np.zeros((3, 3)))
    bad = np.zeros(GRID.shape)
    bad[5, 5] = np.nan
    with pytest.raises(ValueError):
        Field2D(GRID, bad)
    f = Field2D.constant(GRID, 2.0)
    with pytest.raises(ValueError):
        f.values[0, 0] = 1.0


def test_field_arithmetic_requires_same_grid():
    f = Field2D.constant(GRID, 1.0)
    g = Field2D.constant(GRID.resized(50, 50), 1.0)
    with pytest.raises(ValueError):
        f + g
    assert np.all((2.0 * f + f).values == 3.0)


def test_field_csv_keeps_full_precision(tmp_path):
    grid = SpatialGrid2D(4.0, 5.0, 0.0, 5.0, 7, 5)
    f = Field2D.from_function(grid, lambda z, r: np.sin(z) * np.exp(-r) / 3.0)
    f.to_csv(tmp_path / "f.csv")
    back = Field2D.from_csv(grid, tmp_path / "f.csv")
    assert np.array_equal(back.values, f.values)


def test_derivatives_of_constant_vanish():
    for d in central_diffs(Field2D.constant(GRID, 3.7)):
        assert np.max(np.abs(d.values)) < 1e-9


def test_second_difference_is_exact_on_quadratics():
    _, _, f_zz, _, _ = central_diffs(Field2D.from_function(GRID, lambda z, r: z**2 + 0.0 * r))
    assert np.allclose(f_zz.values, 2.0, atol=1e-6)


def test_mixed_derivative_is_second_order():
    f = Field2D.from_function(GRID, lambda z, r: np.sin(z) * np.cos(r))
    z, r = GRID.mesh()
    f_zr = central_diffs(f)[4].values
    err = np.max(np.abs(f_zr - (-np.cos(z) * np.sin(r)))[1:-1, 1:-1])
    assert err < 5.0 * (GRID.h_z**2 + GRID.h_r**2)


def test_trapezoid_integral_of_constants():
    one = Field2D.constant(GRID, 1.0)
    assert integrate_against(one, one) == pytest.approx(5.0, rel=1e-12)
    linear = Field2D.from_function(GRID, lambda z, r: z + 0.0 * r)
    assert integrate_against(linear, one) == pytest.approx(5.0 * 4.5, rel=1e-12)


def test_bilinear_clamps_outside_the_grid():
    f = Field2D.from_function(GRID, lambda z, r: 2.0 * z + r)
    assert bilinear(GRID, f.values, 4.5, 2.5) == pytest.approx(11.5)
    assert f.interpolate(10.0, -1.0) == pytest.approx(10.0)


def test_bilinear_scalar_query_gives_a_float():
    f = Field2D.from_function(GRID, lambda z, r: 2.0 * z + r)
    value = bilinear(GRID, f.values, 4.5, 2.5)
    assert isinstance(value, float)
    grid_z, grid_r = np.meshgrid([4.2, 4.7], [2.1, 2.4, 2.8], indexing="ij")
    block = bilinear(GRID, f.values, grid_z, grid_r)
    assert block.shape == (2, 3)
    assert np.allclose(block, 2.0 * grid_z + grid_r)


def main():
    sys.exit(pytest.main([__file__, "-q"]))


if __name__ == "__main__":
    main()
