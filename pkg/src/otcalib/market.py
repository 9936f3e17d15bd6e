from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import quad

from otcalib.grid import DAYS_PER_YEAR, SpatialGrid2D, TimeGrid
from otcalib.models import CalibrationSettings, GeneratingModel, ReferenceConfig, ScenarioConfig

logger = logging.getLogger(__name__)


# ---------- Closed forms ----------


def hw_b_flat_fit(a: float, sigma_r: float, r0: float) -> Callable[[np.ndarray | float], np.ndarray | float]:
    """Hull-White drift that reproduces a flat initial forward curve at r0."""
    if a <= 0:
        raise ValueError(f"mean reversion a must be positive, got {a}")

    def b(t):
        return a * r0 + sigma_r**2 / (2.0 * a) * (1.0 - np.exp(-2.0 * a * np.asarray(t, dtype=float)))

    return b


def cev_local_variance(z, sigma: float, gamma: float):
    """Squared log-price diffusion coefficient of dS = r S dt + sigma S^gamma dW."""
    return (sigma * np.exp(np.asarray(z, dtype=float) * (gamma - 1.0))) ** 2


def call_payoff(z, strike: float):
    return np.maximum(np.exp(z) - strike, 0.0)


def smoothed_call_payoff(z, strike: float, epsilon: float):
    """(S-K)/2 + (eps/2) ln(2 cosh((S-K)/eps)); slope (tanh((S-K)/eps) + 1)/2."""
    if epsilon <= 0:
        raise ValueError("smoothing width must be positive")
    moneyness = np.exp(z) - strike
    x = moneyness / epsilon
    # ln(2 cosh x) = logaddexp(x, -x) without overflow
    return 0.5 * moneyness + 0.5 * epsilon * np.logaddexp(x, -x)


# ---------- Instruments ----------


@dataclass(frozen=True)
class Instrument:
    """European call; `vega` is 1 until the instrument is vega-scaled."""

    maturity_days: float
    strike: float
    price: float | None = None
    vega: float = 1.0
    implied_vol: float | None = None

    def __post_init__(self) -> None:
        if self.maturity_days <= 0 or self.strike <= 0:
            raise ValueError(f"invalid instrument {self.maturity_days}d K={self.strike}")
        if self.price is not None and self.price <= 0:
            raise ValueError(f"market price must be positive for {self.label}")
        if self.vega <= 0:
            raise ValueError(f"vega weight must be positive for {self.label}")

    @property
    def maturity(self) -> float:
        return self.maturity_days / DAYS_PER_YEAR

    @property
    def label(self) -> str:
        return f"{self.maturity_days:g}d/K{self.strike:g}"

    @property
    def scaled_price(self) -> float:
        if self.price is None:
            raise ValueError(f"{self.label} has no market price")
        return self.price / self.vega

    def payoff(self, z, epsilon: float | None = None):
        if epsilon is None:
            return call_payoff(z, self.strike)
        return smoothed_call_payoff(z, self.strike, epsilon)

    def scaled_payoff(self, z, epsilon: float | None = None):
        return self.payoff(z, epsilon) / self.vega

    def with_price(self, price: float, implied_vol: float | None = None) -> Instrument:
        return replace(self, price=price, implied_vol=implied_vol)

    def unscaled(self) -> Instrument:
        return replace(self, vega=1.0)


# ---------- Hull-White rate dynamics ----------


@dataclass(frozen=True, eq=False)
class HullWhiteParams:
    """dr = (b(t) - a r) dt + sigma_r dW; solvers work on r~ = R r."""

    a: float
    sigma_r: float
    r0: float
    b_samples: np.ndarray = field(repr=False)
    dt: float = 1.0 / DAYS_PER_YEAR
    rescale: float = 100.0

    def __post_init__(self) -> None:
        if self.a <= 0 or self.sigma_r <= 0 or self.rescale <= 0:
            raise ValueError("Hull-White a, sigma_r and R must be positive")
        if not np.all(np.isfinite(self.b_samples)):
            raise ValueError("Hull-White drift b(t) must be finite")

    @classmethod
    def flat_fit(cls, a: float, sigma_r: float, r0: float, time_grid: TimeGrid, rescale: float = 100.0) -> HullWhiteParams:
        b = hw_b_flat_fit(a, sigma_r, r0)
        return cls(a, sigma_r, r0, np.asarray(b(time_grid.nodes), dtype=float), time_grid.dt, rescale)

    def b(self, t):
        nodes = np.arange(len(self.b_samples)) * self.dt
        return np.interp(t, nodes, self.b_samples)

    @property
    def r0_scaled(self) -> float:
        return self.r0 * self.rescale


def _bond_B(a: float, s, T: float):
    return (1.0 - np.exp(-a * (T - s))) / a


def zero_coupon_bond(hw: HullWhiteParams, T: float, t: float = 0.0, r: float | None = None) -> float:
    """P(t, T) given r_t = r (defaults to r0) for the sampled drift b."""
    if T < t:
        raise ValueError("bond maturity precedes valuation time")
    if T == t:
        return 1.0
    r = hw.r0 if r is None else r
    drift, _ = quad(lambda s: float(hw.b(s)) * _bond_B(hw.a, s, T), t, T, limit=500)
    variance, _ = quad(lambda s: _bond_B(hw.a, s, T) ** 2, t, T, limit=200)
    return math.exp(-r * _bond_B(hw.a, t, T) - drift + 0.5 * hw.sigma_r**2 * variance)


# ---------- Reference model ----------


@dataclass(frozen=True, eq=False)
class ReferenceModel:
    """Reference variance sigma_bar^2 and weight xi_ref per time node, shape (N+1, n_z, n_r)."""

    sigma_bar_sq: np.ndarray = field(repr=False)
    xi_ref: np.ndarray = field(repr=False)
    sigma_r: float = 0.05
    p: float = 4.0

    def __post_init__(self) -> None:
        if self.p <= 2:
            raise ValueError(f"reference: cost exponent p must exceed 2, got {self.p}")
        if self.sigma_bar_sq.shape != self.xi_ref.shape:
            raise ValueError("reference: variance and weight surfaces differ in shape")
        if not (np.all(np.isfinite(self.sigma_bar_sq)) and np.all(np.isfinite(self.xi_ref))):
            raise ValueError("reference: surfaces must be finite")
        if np.any(self.sigma_bar_sq <= self.pole):
            raise ValueError("reference: sigma_bar^2 must exceed xi_ref^2 sigma_r^2 everywhere")

    @property
    def pole(self) -> np.ndarray:
        return self.xi_ref**2 * self.sigma_r**2

    def pole_at(self, k: int) -> np.ndarray:
        return self.xi_ref[k] ** 2 * self.sigma_r**2

    @property
    def correlation(self) -> np.ndarray:
        return self.xi_ref * self.sigma_r / np.sqrt(self.sigma_bar_sq)

    @classmethod
    def from_cev(cls, cfg: ReferenceConfig, grid: SpatialGrid2D, time_grid: TimeGrid, sigma_r: float) -> ReferenceModel:
        z, _ = grid.mesh()
        variance = cev_local_variance(z, cfg.sigma, cfg.gamma)
        shape = (time_grid.n_steps + 1, *grid.shape)
        sigma_bar_sq = np.broadcast_to(variance, shape).copy()
        xi_ref = cfg.correlation * np.sqrt(sigma_bar_sq) / sigma_r
        return cls(sigma_bar_sq, xi_ref, sigma_r, cfg.p)

    def with_variance(self, sigma_bar_sq: np.ndarray, floor_ratio: float = 1.0 + 1e-6) -> ReferenceModel:
        """Install a new variance surface, lifted just above the pole where needed."""
        floor = np.maximum(self.pole * floor_ratio, np.finfo(float).tiny)
        lifted = np.maximum(sigma_bar_sq, floor)
        n_lifted = int(np.count_nonzero(lifted != sigma_bar_sq))
        if n_lifted:
            logger.warning("REFERENCE - lifted %d nodes of the new reference variance above the pole", n_lifted)
        return replace(self, sigma_bar_sq=lifted)


# ---------- Calibration problem ----------


@dataclass(frozen=True, eq=False)
class CalibrationProblem:
    grid: SpatialGrid2D
    time_grid: TimeGrid
    hw: HullWhiteParams
    reference: ReferenceModel
    instruments: tuple[Instrument, ...]
    settings: CalibrationSettings
    generating: GeneratingModel
    s0: float

    @property
    def z0(self) -> float:
        return math.log(self.s0)

    @property
    def r0_scaled(self) -> float:
        return self.hw.r0_scaled

    @property
    def epsilon(self) -> float:
        return self.generating.smoothing_width

    def maturity_index(self, instrument: Instrument) -> int:
        return self.time_grid.index_of(instrument.maturity)

    def instruments_at(self, k: int) -> list[int]:
        return [i for i, inst in enumerate(self.instruments) if self.maturity_index(inst) == k]

    def discount_factor(self, maturity: float) -> float:
        return zero_coupon_bond(self.hw, maturity)

    def quote_terms(self, instrument: Instrument) -> tuple[float, float]:
        """Year fraction and discount factor behind an implied-volatility quote."""
        tau = instrument.maturity_days / self.settings.iv_days_per_year
        return tau, zero_coupon_bond(self.hw, tau)

    def with_instruments(self, instruments: Sequence[Instrument]) -> CalibrationProblem:
        return replace(self, instruments=tuple(instruments))

    def with_reference(self, reference: ReferenceModel) -> CalibrationProblem:
        return replace(self, reference=reference)


def build_problem(config: ScenarioConfig, instruments: Sequence[Instrument] | None = None) -> CalibrationProblem:
    """Validate a scenario against every model invariant and assemble the solver inputs."""
    grid = SpatialGrid2D(
        config.grid.z_min, config.grid.z_max, config.grid.r_min, config.grid.r_max,
        config.grid.n_z, config.grid.n_r,
    )
    if instruments is None:
        instruments = [Instrument(i.maturity_days, i.strike) for i in config.instruments]
    time_grid = TimeGrid.daily(
        [i.maturity_days for i in instruments],
        horizon_days=config.time.horizon_days,
        steps_per_day=config.time.steps_per_day,
    )
    hw = HullWhiteParams.flat_fit(
        config.hullwhite.a, config.hullwhite.sigma_r, config.spot.r0, time_grid, config.hullwhite.rescale,
    )
    reference = ReferenceModel.from_cev(config.reference, grid, time_grid, hw.sigma_r)
    z0, r0 = math.log(config.spot.s0), hw.r0_scaled
    if not (grid.z_min < z0 < grid.z_max and grid.r_min < r0 < grid.r_max):
        raise ValueError("grid: the spot state (log s0, R r0) must lie inside the computational domain")
    logger.info(
        "MARKET - problem built: grid=%dx%d steps=%d instruments=%d",
        grid.n_z, grid.n_r, time_grid.n_steps, len(instruments),
    )
    return CalibrationProblem(
        grid=grid,
        time_grid=time_grid,
        hw=hw,
        reference=reference,
        instruments=tuple(instruments),
        settings=config.settings,
        generating=config.generating,
        s0=config.spot.s0,
    )
