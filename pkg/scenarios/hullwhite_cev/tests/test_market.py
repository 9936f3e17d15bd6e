"""Market data, Hull-White closed forms, reference models and scenario loading."""

import math
import sys
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

ROOT = Path(__file__).resolve().parents[3]
sys.path.insert(0, str(ROOT))
sys.path.insert(0, str(ROOT / "src"))

from otcalib.errors import ConfigError  # noqa: E402
from otcalib.grid import SpatialGrid2D, TimeGrid  # noqa: E402
from otcalib.market import (  # noqa: E402
    HullWhiteParams,
    Instrument,
    ReferenceModel,
    build_problem,
    call_payoff,
    cev_local_variance,
    hw_b_flat_fit,
    smoothed_call_payoff,
    zero_coupon_bond,
)
from otcalib.models import ReferenceConfig, load_scenario  # noqa: E402
from scenarios.hullwhite_cev.utils.coarse import BAD_SCENARIO, GOOD_SCENARIO, coarse_config  # noqa: E402


def test_flat_fit_drift_rejects_nonpositive_reversion():
    with pytest.raises(ValueError):
        hw_b_flat_fit(0.0, 0.05, 0.025)


def test_flat_fit_drift_starts_at_a_r0():
    b = hw_b_flat_fit(0.4, 0.05, 0.025)
    assert b(0.0) == pytest.approx(0.4 * 0.025)
    assert b(10.0) == pytest.approx(0.01 + 0.05**2 / 0.8 * (1 - math.exp(-8.0)))


def test_flat_fit_bond_discounts_at_r0():
    tg = TimeGrid.daily([120])
    hw = HullWhiteParams.flat_fit(0.4, 0.05, 0.025, tg)
    for days in (1, 60, 120):
        tau = days / 365
        assert zero_coupon_bond(hw, tau) == pytest.approx(math.exp(-0.025 * tau), rel=1e-7)
    assert zero_coupon_bond(hw, 0.1, 0.1) == 1.0


def test_cev_with_unit_elasticity_is_flat():
    z = np.linspace(4.0, 5.0, 11)
    assert np.allclose(cev_local_variance(z, 0.3, 1.0), 0.09)
    assert cev_local_variance(math.log(92.0), 0.78, 0.9) == pytest.approx((0.78 * 92.0**-0.1) ** 2)


def test_smoothed_payoff_sits_just_above_the_call():
    z = np.log(np.linspace(60.0, 140.0, 161))
    raw = call_payoff(z, 100.0)
    smooth = smoothed_call_payoff(z, 100.0, 0.5)
    gap = smooth - raw
    assert np.all(gap > -1e-12)
    assert np.all(gap[np.abs(np.exp(z) - 100.0) < 5.0] > 0)
    assert np.max(gap) == pytest.approx(0.25 * math.log(2.0), rel=1e-9)


def test_smoothed_payoff_survives_tiny_width():
    z = np.log(np.array([1.0, 100.0, 1e4]))
    out = smoothed_call_payoff(z, 100.0, 1e-6)
    assert np.all(np.isfinite(out))
    assert out[2] == pytest.approx(1e4 - 100.0)
    with pytest.raises(ValueError):
        smoothed_call_payoff(z, 100.0, 0.0)


def test_instrument_validation_and_scaling():
    with pytest.raises(ValueError):
        Instrument(0, 100.0)
    inst = Instrument(60, 92.0, price=7.5, vega=15.0)
    assert inst.maturity == pytest.approx(60 / 365)
    assert inst.scaled_price == pytest.approx(0.5)
    assert inst.unscaled().vega == 1.0
    with pytest.raises(ValueError):
        Instrument(60, 92.0).scaled_price


def test_reference_pole_reflects_the_configured_correlation():
    grid = SpatialGrid2D(4.0, 5.0, 0.0, 5.0, 11, 6)
    tg = TimeGrid.daily([5])
    ref = ReferenceModel.from_cev(ReferenceConfig(sigma=0.9, gamma=0.9, correlation=-0.4), grid, tg, 0.05)
    assert ref.sigma_bar_sq.shape == (6, 11, 6)
    assert np.allclose(ref.pole, 0.16 * ref.sigma_bar_sq)
    assert np.allclose(ref.correlation, -0.4)


def test_reference_variance_is_lifted_above_the_pole():
    grid = SpatialGrid2D(4.0, 5.0, 0.0, 5.0, 5, 5)
    tg = TimeGrid.daily([2])
    ref = ReferenceModel.from_cev(ReferenceConfig(), grid, tg, 0.05)
    lowered = ref.sigma_bar_sq.copy()
    lowered[1, 2, 2] = 0.0
    lifted = ref.with_variance(lowered)
    assert lifted.sigma_bar_sq[1, 2, 2] > lifted.pole[1, 2, 2]
    assert np.array_equal(lifted.sigma_bar_sq[0], ref.sigma_bar_sq[0])


def test_build_problem_requires_the_spot_inside_the_domain():
    config = coarse_config(n=10)
    moved = config.model_copy(update={"grid": config.grid.model_copy(update={"z_min": 4.6})})
    with pytest.raises(ValueError):
        build_problem(moved)


def test_problem_indexes_instruments_by_maturity():
    problem = build_problem(coarse_config(n=10, instruments=[(10, 92.0), (10, 99.0), (20, 92.0)]))
    assert problem.instruments_at(10) == [0, 1]
    assert problem.instruments_at(20) == [2]
    assert problem.time_grid.n_steps == 20


def test_quotes_run_on_their_own_day_count():
    problem = build_problem(coarse_config(n=10))
    inst = problem.instruments[0]
    tau, discount = problem.quote_terms(inst)
    assert problem.settings.iv_days_per_year == 360.0
    assert tau == pytest.approx(10 / 360)
    assert discount == pytest.approx(math.exp(-0.025 * 10 / 360), rel=1e-7)
    assert inst.maturity == pytest.approx(10 / 365)


def test_shipped_scenarios_load():
    good = load_scenario(GOOD_SCENARIO)
    bad = load_scenario(BAD_SCENARIO)
    assert len(good.instruments) == 12
    assert good.reference.correlation == -0.4
    assert bad.reference.correlation == 0.4
    assert bad.generating == good.generating


def test_missing_or_invalid_scenario_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_scenario(tmp_path / "absent.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[reference]\ncorrelation = 1.0\n\n[time]\nhorizon_days = 10\n")
    with pytest.raises(ConfigError, match="correlation"):
        load_scenario(bad)


def test_overrides_are_revalidated():
    config = load_scenario(GOOD_SCENARIO)
    assert config.with_overrides(grid=(40, 30)).grid.n_r == 30
    with pytest.raises(ValidationError):
        config.with_overrides(grid=(2, 2))


def main():
    sys.exit(pytest.main([__file__, "-q"]))


if __name__ == "__main__":
    main()
