from __future__ import annotations

import asyncio
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np
from scipy.optimize import brentq
from scipy.sparse.linalg import splu
from scipy.stats import norm

from otcalib.errors import ImpliedVolError, NumericalError
from otcalib.grid import Field2D, bilinear
from otcalib.hjb import HJBSolution, model_coefficients
from otcalib.market import CalibrationProblem, Instrument, cev_local_variance
from otcalib.stencil import assemble_operator, closure_matrix, closure_rhs, implicit_system, interior_mask

logger = logging.getLogger(__name__)

DOUGLAS_THETA = 0.5


# ---------- Black-Scholes utilities ----------


def bs_price(s0: float, strike: float, tau: float, vol: float, discount: float) -> float:
    """Call on a stock with forward s0/discount, discounted with `discount`."""
    forward = s0 / discount
    total_vol = vol * math.sqrt(tau)
    if total_vol <= 0:
        return discount * max(forward - strike, 0.0)
    if strike <= 0:
        return s0
    d1 = (math.log(forward / strike) + 0.5 * total_vol**2) / total_vol
    d2 = d1 - total_vol
    return float(s0 * norm.cdf(d1) - discount * strike * norm.cdf(d2))


def bs_vega(s0: float, strike: float, tau: float, vol: float, discount: float) -> float:
    """d(price)/d(vol) per unit of volatility."""
    forward = s0 / discount
    total_vol = vol * math.sqrt(tau)
    d1 = (math.log(forward / strike) + 0.5 * total_vol**2) / total_vol
    return float(s0 * norm.pdf(d1) * math.sqrt(tau))


def implied_vol(price: float, s0: float, strike: float, tau: float, discount: float, tol: float = 1e-10) -> float:
    lower = max(s0 - discount * strike, 0.0)
    if not lower < price < s0:
        raise ImpliedVolError(
            f"price {price:.10g} outside the no-arbitrage bounds ({lower:.10g}, {s0:.10g}) for K={strike:g}"
        )

    def gap(vol: float) -> float:
        return bs_price(s0, strike, tau, vol, discount) - price

    lo, hi = 1e-9, 1.0
    while gap(hi) < 0:
        hi *= 2.0
        if hi > 1e3:
            raise ImpliedVolError(f"no volatility reproduces price {price:.10g} for K={strike:g}")
    if gap(lo) > 0:
        raise ImpliedVolError(f"price {price:.10g} is too close to the lower bound for K={strike:g}")
    vol = brentq(gap, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    if abs(gap(vol)) > tol * max(1.0, price):
        raise ImpliedVolError(f"implied volatility did not converge for K={strike:g}")
    return float(vol)


# ---------- Model surfaces ----------


@dataclass(frozen=True, eq=False)
class ModelSurfaces:
    """Characteristics beta11 and beta12 (unscaled rate units) per time node, shape (N+1, n_z, n_r)."""

    beta11: np.ndarray = field(repr=False)
    beta12: np.ndarray = field(repr=False)
    sigma_r: float

    def __post_init__(self) -> None:
        if self.beta11.shape != self.beta12.shape:
            raise ValueError("surfaces: beta11 and beta12 differ in shape")
        if not (np.all(np.isfinite(self.beta11)) and np.all(np.isfinite(self.beta12))):
            raise ValueError("surfaces: characteristics must be finite")
        if np.any(self.beta11 <= 0):
            raise ValueError("surfaces: beta11 must be positive")
        det = self.beta11 * self.sigma_r**2 - self.beta12**2
        if np.any(det < -1e-12 * self.beta11 * self.sigma_r**2):
            raise ValueError("surfaces: [[beta11, beta12], [beta12, sigma_r^2]] must be positive semidefinite")

    @classmethod
    def from_reference(cls, problem: CalibrationProblem) -> ModelSurfaces:
        ref = problem.reference
        return cls(ref.sigma_bar_sq.copy(), ref.xi_ref * ref.sigma_r**2, ref.sigma_r)

    @classmethod
    def from_hjb(cls, solution: HJBSolution, problem: CalibrationProblem) -> ModelSurfaces:
        ref = problem.reference
        return cls(solution.beta11_star, ref.xi_ref * ref.sigma_r**2, ref.sigma_r)

    @classmethod
    def from_beta11(cls, beta11: np.ndarray, problem: CalibrationProblem) -> ModelSurfaces:
        ref = problem.reference
        return cls(beta11, ref.xi_ref * ref.sigma_r**2, ref.sigma_r)

    @classmethod
    def from_generating(cls, problem: CalibrationProblem) -> ModelSurfaces:
        gen, hw = problem.generating, problem.hw
        z, _ = problem.grid.mesh()
        shape = (problem.time_grid.n_steps + 1, *problem.grid.shape)
        variance = np.broadcast_to(cev_local_variance(z, gen.sigma, gen.gamma), shape)
        covariance = gen.correlation * np.sqrt(variance) * hw.sigma_r
        return cls(variance.copy(), covariance.copy(), hw.sigma_r)

    @property
    def n_nodes(self) -> int:
        return self.beta11.shape[0]

    def correlation(self, k: int) -> np.ndarray:
        return self.beta12[k] / (self.sigma_r * np.sqrt(self.beta11[k]))

    def to_csv(self, problem: CalibrationProblem, out_dir: str | Path, with_correlation: bool = True) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for k in range(self.n_nodes):
            Field2D(problem.grid, self.beta11[k]).to_csv(out_dir / f"beta11_t{k}.csv")
            if with_correlation:
                Field2D(problem.grid, self.correlation(k)).to_csv(out_dir / f"xi_t{k}.csv")

    @classmethod
    def from_csv(cls, problem: CalibrationProblem, in_dir: str | Path) -> ModelSurfaces:
        in_dir = Path(in_dir)
        n = problem.time_grid.n_steps + 1
        missing = [k for k in range(n) if not (in_dir / f"beta11_t{k}.csv").exists()]
        if missing:
            raise FileNotFoundError(f"{in_dir}: missing beta11 slices {missing[:5]}...")
        beta11 = np.stack([Field2D.from_csv(problem.grid, in_dir / f"beta11_t{k}.csv").values for k in range(n)])
        return cls.from_beta11(beta11, problem)


@dataclass(frozen=True, eq=False)
class PriceResult:
    price: float
    implied_vol: float | None = None
    values: Field2D | None = field(default=None, repr=False)


# ---------- Pricing PDE ----------


PayoffLike = Union[np.ndarray, Callable[[np.ndarray, np.ndarray], np.ndarray]]


def _payoff_grid(payoff: PayoffLike, problem: CalibrationProblem) -> np.ndarray:
    grid = problem.grid
    if callable(payoff):
        z, r = grid.mesh()
        values = np.broadcast_to(payoff(z, r), grid.shape)
    else:
        values = np.broadcast_to(np.asarray(payoff, dtype=float), grid.shape)
    if not np.all(np.isfinite(values)):
        raise ValueError("payoff must be finite on the grid")
    return np.array(values, dtype=float)


def _split_operators(surfaces: ModelSurfaces, k: int, problem: CalibrationProblem):
    c = model_coefficients(problem, k, surfaces.beta11[k], surfaces.beta12[k])
    grid = problem.grid
    a0 = assemble_operator(grid, cross=c["cross"], reaction=c["reaction"])
    a1 = assemble_operator(grid, drift_z=c["drift_z"], diff_zz=c["diff_zz"])
    a2 = assemble_operator(grid, drift_r=c["drift_r"], diff_rr=c["diff_rr"])
    return a0, a1, a2


def _adi_backward(surfaces: ModelSurfaces, payoffs: np.ndarray, maturity_index: int, problem: CalibrationProblem) -> np.ndarray:
    """Douglas sweeps from t_m to 0 for a batch of payoffs, shape (batch, n_z, n_r).

    Both implicit sweeps carry the boundary closure rows, so every
    intermediate stage satisfies the frozen second differences of the payoff.
    """
    grid, dt = problem.grid, problem.time_grid.dt
    theta = DOUGLAS_THETA
    mask = interior_mask(grid).ravel()[:, None]
    batch = payoffs.reshape(len(payoffs), -1).T.copy()
    boundary = closure_matrix(grid) @ batch
    for k in range(maturity_index - 1, -1, -1):
        a0, a1, a2 = _split_operators(surfaces, k, problem)
        lu1 = splu(implicit_system(grid, a1, theta * dt))
        lu2 = splu(implicit_system(grid, a2, theta * dt))
        y0 = batch + dt * ((a0 + a1 + a2) @ batch)
        y1 = lu1.solve(np.where(mask, y0 - theta * dt * (a1 @ batch), 0.0) + boundary)
        y2 = lu2.solve(np.where(mask, y1 - theta * dt * (a2 @ batch), 0.0) + boundary)
        if not np.all(np.isfinite(y2)):
            raise NumericalError("non-finite value in ADI pricing", time_index=k)
        batch = y2
    return batch.T.reshape(payoffs.shape)


def adi_price(
    surfaces: ModelSurfaces,
    payoff: PayoffLike,
    maturity: float,
    problem: CalibrationProblem,
) -> PriceResult:
    """Discounted expectation of payoff(Z_tau, r~_tau) under the surfaces, by Douglas ADI."""
    m = problem.time_grid.index_of(maturity)
    values = _adi_backward(surfaces, _payoff_grid(payoff, problem)[None], m, problem)[0]
    field0 = Field2D(problem.grid, values)
    return PriceResult(bilinear(problem.grid, values, problem.z0, problem.r0_scaled), None, field0)


def implicit_price(
    surfaces: ModelSurfaces,
    payoff: PayoffLike,
    maturity: float,
    problem: CalibrationProblem,
) -> PriceResult:
    """Same PDE as adi_price, fully implicit with the closure inside the matrix."""
    grid, dt = problem.grid, problem.time_grid.dt
    anchor = _payoff_grid(payoff, problem)
    values = anchor
    for k in range(problem.time_grid.index_of(maturity) - 1, -1, -1):
        c = model_coefficients(problem, k, surfaces.beta11[k], surfaces.beta12[k])
        matrix = implicit_system(grid, assemble_operator(grid, **c), dt)
        rhs = np.where(interior_mask(grid), values, 0.0).ravel() + closure_rhs(grid, anchor)
        values = splu(matrix).solve(rhs).reshape(grid.shape)
        if not np.all(np.isfinite(values)):
            raise NumericalError("non-finite value in implicit pricing", time_index=k)
    return PriceResult(bilinear(grid, values, problem.z0, problem.r0_scaled), None, Field2D(grid, values))


def quote_implied_vol(price: float, instrument: Instrument, problem: CalibrationProblem) -> float | None:
    """Deterministic-rate Black-Scholes quote with discount factor P(0, tau) on the quoting clock."""
    tau, discount = problem.quote_terms(instrument)
    try:
        return implied_vol(price, problem.s0, instrument.strike, tau, discount)
    except ImpliedVolError as e:
        logger.warning("PRICING - %s: %s", instrument.label, e)
        return None


def _price_group(
    surfaces: ModelSurfaces,
    group: list[Instrument],
    problem: CalibrationProblem,
    epsilon: float | None,
) -> list[float]:
    z, _ = problem.grid.mesh()
    payoffs = np.stack([inst.payoff(z, epsilon) for inst in group])
    m = problem.maturity_index(group[0])
    values = _adi_backward(surfaces, payoffs, m, problem)
    return [bilinear(problem.grid, v, problem.z0, problem.r0_scaled) for v in values]


async def price_instruments_async(
    surfaces: ModelSurfaces,
    instruments: Sequence[Instrument],
    problem: CalibrationProblem,
    smoothed: bool = False,
) -> list[float]:
    """Unscaled model prices; one worker thread per maturity, results in input order."""
    groups: dict[int, list[int]] = defaultdict(list)
    for i, inst in enumerate(instruments):
        groups[problem.maturity_index(inst)].append(i)
    epsilon = problem.epsilon if smoothed else None
    order = sorted(groups)
    results = await asyncio.gather(
        *(
            asyncio.to_thread(_price_group, surfaces, [instruments[i] for i in groups[m]], problem, epsilon)
            for m in order
        )
    )
    prices = [0.0] * len(instruments)
    for m, group_prices in zip(order, results):
        for i, price in zip(groups[m], group_prices):
            prices[i] = price
    return prices


def price_instruments(
    surfaces: ModelSurfaces,
    instruments: Sequence[Instrument],
    problem: CalibrationProblem,
    smoothed: bool = False,
) -> list[float]:
    if not instruments:
        return []
    return asyncio.run(price_instruments_async(surfaces, instruments, problem, smoothed))


def price_instrument(
    surfaces: ModelSurfaces,
    instrument: Instrument,
    problem: CalibrationProblem,
    smoothed: bool = False,
) -> PriceResult:
    epsilon = problem.epsilon if smoothed else None
    result = adi_price(surfaces, lambda z, r: instrument.payoff(z, epsilon), instrument.maturity, problem)
    return PriceResult(result.price, quote_implied_vol(result.price, instrument, problem), result.values)
