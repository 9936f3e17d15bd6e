from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from scipy.interpolate import CubicSpline
from scipy.optimize import line_search

from otcalib.errors import CalibrationError, ConvergenceError
from otcalib.grid import SpatialGrid2D
from otcalib.hjb import HJBSolution, jump_payoffs, linearized_values, solve_hjb
from otcalib.market import CalibrationProblem, Instrument
from otcalib.pricing import ModelSurfaces, bs_vega, implied_vol, price_instruments, quote_implied_vol

logger = logging.getLogger(__name__)

TV_SLACK = 1e-9


# ---------- Vega scaling ----------


def vega_scale(instruments: Sequence[Instrument], problem: CalibrationProblem) -> list[Instrument]:
    """Attach the Black-Scholes vega at each market implied volatility."""
    scaled = []
    for inst in instruments:
        if inst.price is None:
            raise ValueError(f"{inst.label} has no market price to calibrate against")
        tau, discount = problem.quote_terms(inst)
        vol = implied_vol(inst.price, problem.s0, inst.strike, tau, discount)
        vega = bs_vega(problem.s0, inst.strike, tau, vol, discount)
        if not vega > 0:
            raise ValueError(f"{inst.label}: vega {vega:.3e} is not positive")
        scaled.append(replace(inst, vega=vega, implied_vol=vol))
    return scaled


def unscale(lam: np.ndarray, instruments: Sequence[Instrument]) -> np.ndarray:
    """Multipliers of the unscaled constraints E[disc G_i] = u_i."""
    return np.asarray(lam, dtype=float) / np.array([inst.vega for inst in instruments])


# ---------- Dual objective ----------


def _model_values(beta11: np.ndarray, problem: CalibrationProblem, smoothed: bool) -> np.ndarray:
    """Vega-scaled model prices of every instrument under the variance surface beta11."""
    if problem.settings.gradient_pricer == "tangent":
        return linearized_values(beta11, problem, jump_payoffs(problem, smoothed=smoothed))
    surfaces = ModelSurfaces.from_beta11(beta11, problem)
    prices = price_instruments(surfaces, problem.instruments, problem, smoothed=smoothed)
    return np.array(prices) / np.array([inst.vega for inst in problem.instruments])


def smoothing_targets(problem: CalibrationProblem) -> np.ndarray:
    """Scaled targets u~_i for the smoothed payoffs.

    Market quotes refer to raw calls; the target for G~_i adds the reference
    model's smoothed-minus-raw premium, so that at lambda = 0 the gradient is
    the market price minus the reference price of the raw call.
    """
    targets = np.array([inst.scaled_price for inst in problem.instruments])
    if not problem.settings.smoothing_adjustment:
        return targets
    variance = problem.reference.sigma_bar_sq
    premium = _model_values(variance, problem, smoothed=True) - _model_values(variance, problem, smoothed=False)
    logger.debug("CALIB - smoothing premia (scaled): %s", np.array2string(premium, precision=6))
    return targets + premium


@dataclass(frozen=True, eq=False)
class DualEvaluation:
    lam: np.ndarray
    value: float
    grad: np.ndarray
    model_values: np.ndarray
    solution: HJBSolution = field(repr=False)


def dual_objective_and_gradient(
    lam: np.ndarray,
    problem: CalibrationProblem,
    targets: np.ndarray | None = None,
) -> DualEvaluation:
    """L(lambda) = sum lambda_i u~_i - phi(0, Z0, r~0) and its gradient u~ - E[disc G~]."""
    lam = np.asarray(lam, dtype=float)
    targets = smoothing_targets(problem) if targets is None else targets
    solution = solve_hjb(lam, problem)
    model = _model_values(solution.beta11_star, problem, smoothed=True)
    value = float(lam @ targets) - solution.value_at_spot
    grad = targets - model
    if not (np.isfinite(value) and np.all(np.isfinite(grad))):
        raise CalibrationError("dual objective is not finite")
    return DualEvaluation(lam.copy(), value, grad, model, solution)


# ---------- L-BFGS ----------


@dataclass
class DualState:
    """Iterate of the outer optimiser with its curvature memory."""

    x: np.ndarray
    f: float
    g: np.ndarray
    iteration: int = 0
    memory: deque = field(default_factory=deque)

    @property
    def grad_supnorm(self) -> float:
        return float(np.max(np.abs(self.g), initial=0.0))

    def direction(self) -> np.ndarray:
        """Two-loop recursion for -H_k g."""
        q = self.g.copy()
        alphas = []
        for s, y, rho in reversed(self.memory):
            a = rho * (s @ q)
            q -= a * y
            alphas.append(a)
        if self.memory:
            s, y, _ = self.memory[-1]
            q *= (s @ y) / (y @ y)
        for (s, y, rho), a in zip(self.memory, reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        return -q


@dataclass(frozen=True, eq=False)
class LBFGSResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    iterations: int
    converged: bool
    trace: list[dict] = field(default_factory=list, repr=False)

    @property
    def grad_supnorm(self) -> float:
        return float(np.max(np.abs(self.g), initial=0.0))


class _CachedObjective:
    """Serves f and g separately to the line search from one evaluation per point."""

    def __init__(self, fun: Callable[[np.ndarray], tuple[float, np.ndarray]]):
        self.fun = fun
        self.calls = 0
        self._cache: dict[bytes, tuple[float, np.ndarray]] = {}

    def __call__(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        key = np.ascontiguousarray(x, dtype=float).tobytes()
        if key not in self._cache:
            self.calls += 1
            f, g = self.fun(np.array(x, dtype=float))
            self._cache[key] = (float(f), np.asarray(g, dtype=float))
            while len(self._cache) > 8:
                self._cache.pop(next(iter(self._cache)))
        return self._cache[key]

    def f(self, x: np.ndarray) -> float:
        return self(x)[0]

    def g(self, x: np.ndarray) -> np.ndarray:
        return self(x)[1]


def lbfgs_minimize(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    *,
    tolerance: float,
    max_iterations: int,
    memory: int = 10,
    c1: float = 1e-4,
    c2: float = 0.9,
    callback: Callable[[DualState], None] | None = None,
) -> LBFGSResult:
    """Minimise fun (returning value and gradient) until |grad|_inf < tolerance.

    Steps satisfy the strong Wolfe conditions. A failed line search is retried
    once along steepest descent with the curvature memory cleared.
    """
    objective = _CachedObjective(fun)
    x = np.array(x0, dtype=float)
    f, g = objective(x)
    state = DualState(x, f, g.copy(), 0, deque(maxlen=memory))
    started = time.perf_counter()
    trace = [_trace_row(state, started)]
    if callback:
        callback(state)

    while state.grad_supnorm >= tolerance:
        if state.iteration >= max_iterations:
            logger.warning("LBFGS - stopped after %d iterations, |grad|=%.3e", state.iteration, state.grad_supnorm)
            return LBFGSResult(state.x, state.f, state.g, state.iteration, False, trace)
        d = state.direction()
        if state.g @ d >= 0:
            state.memory.clear()
            d = -state.g
        step = _wolfe_step(objective, state, d, c1, c2)
        if step is None:
            logger.info("LBFGS - line search failed at iteration %d, retrying along -grad", state.iteration)
            state.memory.clear()
            d = -state.g
            step = _wolfe_step(objective, state, d, c1, c2)
        if step is None:
            raise ConvergenceError(
                f"line search failed at iteration {state.iteration} (f={state.f:.10g})",
                residual=state.grad_supnorm,
                partial=LBFGSResult(state.x, state.f, state.g, state.iteration, False, trace),
            )
        alpha, f_new, g_new = step
        s = alpha * d
        y = g_new - state.g
        if s @ y > 1e-12 * np.sqrt((s @ s) * (y @ y)):
            state.memory.append((s, y, 1.0 / (s @ y)))
        state.x, state.f, state.g = state.x + s, f_new, g_new
        state.iteration += 1
        trace.append(_trace_row(state, started))
        logger.info(
            "LBFGS - iter %d f=%.10g |grad|=%.3e step=%.3e evals=%d",
            state.iteration, state.f, state.grad_supnorm, alpha, objective.calls,
        )
        if callback:
            callback(state)
    return LBFGSResult(state.x, state.f, state.g, state.iteration, True, trace)


def _wolfe_step(objective: _CachedObjective, state: DualState, d: np.ndarray, c1: float, c2: float):
    alpha, *_ = line_search(
        objective.f, objective.g, state.x, d, gfk=state.g, old_fval=state.f, c1=c1, c2=c2, maxiter=20,
    )
    if alpha is None or not np.isfinite(alpha) or alpha <= 0:
        return None
    f_new, g_new = objective(state.x + alpha * d)
    return float(alpha), f_new, g_new.copy()


def _trace_row(state: DualState, started: float) -> dict:
    return {
        "iter": state.iteration,
        "f": state.f,
        "grad_supnorm": state.grad_supnorm,
        "wall_ms": 1e3 * (time.perf_counter() - started),
    }


# ---------- Calibration ----------


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    problem: CalibrationProblem = field(repr=False)
    lam: np.ndarray
    value: float
    grad: np.ndarray
    iterations: int
    converged: bool
    solution: HJBSolution = field(repr=False)
    trace: list[dict] = field(default_factory=list, repr=False)

    @property
    def grad_supnorm(self) -> float:
        return float(np.max(np.abs(self.grad), initial=0.0))

    @property
    def surfaces(self) -> ModelSurfaces:
        return ModelSurfaces.from_hjb(self.solution, self.problem)


def calibrate(problem: CalibrationProblem, lam0: np.ndarray | None = None) -> CalibrationResult:
    """Maximise the concave dual over the vega-scaled multipliers."""
    if not problem.instruments:
        raise ValueError("calibration needs at least one priced instrument")
    if any(inst.implied_vol is None for inst in problem.instruments):
        problem = problem.with_instruments(vega_scale(problem.instruments, problem))
    settings = problem.settings
    targets = smoothing_targets(problem)
    evaluations: dict[bytes, DualEvaluation] = {}

    def negated(lam: np.ndarray) -> tuple[float, np.ndarray]:
        ev = dual_objective_and_gradient(lam, problem, targets)
        evaluations[lam.tobytes()] = ev
        while len(evaluations) > 8:
            evaluations.pop(next(iter(evaluations)))
        return -ev.value, -ev.grad

    lam0 = np.zeros(len(problem.instruments)) if lam0 is None else np.asarray(lam0, dtype=float)
    started = time.perf_counter()
    try:
        result = lbfgs_minimize(
            negated,
            lam0,
            tolerance=settings.tolerance_iv,
            max_iterations=settings.max_outer_iterations,
            memory=settings.lbfgs_memory,
            c1=settings.wolfe_c1,
            c2=settings.wolfe_c2,
        )
    except ConvergenceError as e:
        if not isinstance(e.partial, LBFGSResult):
            raise
        # the last accepted iterate goes out with the error for the partial report
        partial = _result_from(e.partial, problem, targets, evaluations, started)
        raise ConvergenceError(str(e), partial=partial) from e
    return _result_from(result, problem, targets, evaluations, started)


def _result_from(
    result: LBFGSResult,
    problem: CalibrationProblem,
    targets: np.ndarray,
    evaluations: dict[bytes, DualEvaluation],
    started: float,
) -> CalibrationResult:
    final = evaluations.get(np.asarray(result.x, dtype=float).tobytes())
    if final is None:
        final = dual_objective_and_gradient(result.x, problem, targets)
    trace = [{"iter": row["iter"], "L": -row["f"], "grad_supnorm": row["grad_supnorm"], "wall_ms": row["wall_ms"]} for row in result.trace]
    logger.info(
        "CALIB - %s after %d iterations: L=%.10g |grad|=%.3e (%.1fs)",
        "converged" if result.converged else "stopped", result.iterations, final.value,
        float(np.max(np.abs(final.grad))), time.perf_counter() - started,
    )
    return CalibrationResult(problem, final.lam, final.value, final.grad, result.iterations, result.converged, final.solution, trace)


# ---------- Spline smoothing epochs ----------


def _spline_axis(values: np.ndarray, coords: np.ndarray, stride: int, axis: int) -> np.ndarray:
    n = len(coords)
    knots = np.arange(0, n, stride)
    if knots[-1] != n - 1:
        knots = np.append(knots, n - 1)
    if len(knots) < 2:
        return values
    spline = CubicSpline(coords[knots], np.take(values, knots, axis=axis), axis=axis, bc_type="natural")
    return spline(coords)


def spline_smooth(values: np.ndarray, grid: SpatialGrid2D, stride: int = 4) -> np.ndarray:
    """Natural cubic spline through every `stride`-th node along z, then along r."""
    if stride < 1:
        raise ValueError("spline stride must be at least 1")
    smoothed = _spline_axis(np.asarray(values, dtype=float), grid.z, stride, axis=0)
    return _spline_axis(smoothed, grid.r, stride, axis=1)


def surface_total_variation(beta11: np.ndarray) -> float:
    """Sum of absolute nodal jumps along z and r over every time slice."""
    beta11 = np.asarray(beta11, dtype=float)
    return float(np.abs(np.diff(beta11, axis=-2)).sum() + np.abs(np.diff(beta11, axis=-1)).sum())


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    iterations: int
    grad_supnorm: float
    value: float
    total_variation: float


def smooth_and_recalibrate(
    result: CalibrationResult,
    epochs: int,
) -> tuple[CalibrationResult, list[EpochRecord]]:
    """Spline the calibrated variance into the next reference and recalibrate, `epochs` times.

    Each epoch warm-starts at the previous multipliers. An epoch that fails to
    converge, or that raises the total variation of the variance surface, ends
    the loop and the last accepted result is returned.
    """
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    records = [_epoch_record(0, result)]
    current = result
    for epoch in range(1, epochs + 1):
        stride = current.problem.settings.spline_stride
        smoothed = np.stack([spline_smooth(b, current.problem.grid, stride) for b in current.solution.beta11_star])
        next_problem = current.problem.with_reference(current.problem.reference.with_variance(smoothed))
        try:
            candidate = calibrate(next_problem, lam0=current.lam)
        except CalibrationError as e:
            logger.warning("CALIB - epoch %d failed, keeping epoch %d: %s", epoch, epoch - 1, e)
            break
        if not candidate.converged:
            logger.warning("CALIB - epoch %d did not converge, keeping epoch %d", epoch, epoch - 1)
            break
        record = _epoch_record(epoch, candidate)
        # relative slack for rounding when smoothing leaves the surface unchanged
        if record.total_variation > records[-1].total_variation * (1.0 + TV_SLACK):
            logger.warning(
                "CALIB - epoch %d raised total variation %.6g -> %.6g, keeping epoch %d",
                epoch, records[-1].total_variation, record.total_variation, epoch - 1,
            )
            break
        current = candidate
        records.append(record)
        logger.info(
            "CALIB - epoch %d: iterations=%d |grad|=%.3e total variation=%.6g",
            epoch, current.iterations, current.grad_supnorm, records[-1].total_variation,
        )
    return current, records


def _epoch_record(epoch: int, result: CalibrationResult) -> EpochRecord:
    return EpochRecord(epoch, result.iterations, result.grad_supnorm, result.value, surface_total_variation(result.solution.beta11_star))


# ---------- Report ----------


@dataclass(frozen=True, eq=False)
class CalibrationReport:
    rows: list[dict]
    lam: np.ndarray
    lam_unscaled: np.ndarray
    grad_supnorm: float
    outer_iterations: int
    epochs: list[EpochRecord]
    wall_time: float
    converged: bool
    trace: list[dict] = field(default_factory=list, repr=False)

    @classmethod
    def build(
        cls,
        result: CalibrationResult,
        epochs: list[EpochRecord],
        wall_time: float,
    ) -> CalibrationReport:
        """Reprice the raw calls by ADI on the calibrated surfaces and compare with the market."""
        problem = result.problem
        model_prices = price_instruments(result.surfaces, problem.instruments, problem, smoothed=False)
        rows = []
        for inst, price in zip(problem.instruments, model_prices):
            model_iv = quote_implied_vol(price, inst, problem)
            rows.append({
                "maturity_days": inst.maturity_days,
                "strike": inst.strike,
                "market_price": inst.price,
                "model_price": price,
                "market_iv": inst.implied_vol,
                "model_iv": model_iv,
                "abs_iv_error": None if model_iv is None or inst.implied_vol is None else abs(model_iv - inst.implied_vol),
            })
        return cls(
            rows=rows,
            lam=result.lam,
            lam_unscaled=unscale(result.lam, problem.instruments),
            grad_supnorm=result.grad_supnorm,
            outer_iterations=sum(e.iterations for e in epochs) if epochs else result.iterations,
            epochs=epochs,
            wall_time=wall_time,
            converged=result.converged,
            trace=result.trace,
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def summary(self) -> dict:
        return {
            "converged": self.converged,
            "grad_supnorm": self.grad_supnorm,
            "outer_iterations": self.outer_iterations,
            "epochs": max((e.epoch for e in self.epochs), default=0),
            "wall_time_s": self.wall_time,
        }

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(out_dir / "report.csv", index=False, float_format="%.17g")
        pd.DataFrame([self.summary()]).to_csv(out_dir / "summary.csv", index=False, float_format="%.17g")
        pd.DataFrame({
            "instrument_id": [f"{r['maturity_days']:g}d_K{r['strike']:g}" for r in self.rows],
            "maturity_days": [r["maturity_days"] for r in self.rows],
            "strike": [r["strike"] for r in self.rows],
            "lambda_scaled": self.lam,
            "lambda": self.lam_unscaled,
        }).to_csv(out_dir / "lambda.csv", index=False, float_format="%.17g")
        pd.DataFrame(self.trace, columns=["iter", "L", "grad_supnorm", "wall_ms"]).to_csv(
            out_dir / "trace.csv", index=False, float_format="%.17g"
        )
        pd.DataFrame([asdict(e) for e in self.epochs]).to_csv(out_dir / "epochs.csv", index=False, float_format="%.17g")
        logger.info("CALIB - report written to %s", out_dir)
