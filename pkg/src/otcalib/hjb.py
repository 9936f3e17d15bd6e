from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse.linalg import splu

from otcalib.cost import H, optimal_beta11
from otcalib.errors import ConvergenceError, NumericalError
from otcalib.grid import Field2D, bilinear, difference_arrays
from otcalib.market import CalibrationProblem
from otcalib.stencil import assemble_operator, closure_matrix, closure_rhs, implicit_system, interior_mask

logger = logging.getLogger(__name__)


# ---------- Model generator in rescaled coordinates ----------


def model_coefficients(problem: CalibrationProblem, k: int, beta11: np.ndarray, beta12: np.ndarray) -> dict[str, np.ndarray | float]:
    """Coefficients of the pricing generator at t_k on the (z, r~) grid.

    beta12 is the stock/rate covariance rate in unscaled units; the rescaled
    rate r~ = R r carries drift R b - a r~, variance R^2 sigma_r^2 and
    covariance R beta12, while discounting and the stock drift use r~/R.
    """
    hw = problem.hw
    R = hw.rescale
    _, r_scaled = problem.grid.mesh()
    t = problem.time_grid.nodes[k]
    rate = r_scaled / R
    return {
        "drift_z": rate - 0.5 * beta11,
        "drift_r": R * float(hw.b(t)) - hw.a * r_scaled,
        "diff_zz": 0.5 * beta11,
        "diff_rr": 0.5 * (R * hw.sigma_r) ** 2,
        "cross": R * beta12,
        "reaction": -rate,
    }


def reference_covariance(problem: CalibrationProblem, k: int) -> np.ndarray:
    return problem.reference.xi_ref[k] * problem.hw.sigma_r**2


# ---------- Solution container ----------


@dataclass(frozen=True, eq=False)
class HJBSolution:
    phi: np.ndarray = field(repr=False)
    beta11_star: np.ndarray = field(repr=False)
    value_at_spot: float
    policy_iterations: np.ndarray = field(repr=False)

    def phi_at(self, problem: CalibrationProblem, k: int) -> Field2D:
        return Field2D(problem.grid, self.phi[k])

    def beta11_at(self, problem: CalibrationProblem, k: int) -> Field2D:
        return Field2D(problem.grid, self.beta11_star[k])


# ---------- Building blocks ----------


def jump_payoffs(problem: CalibrationProblem, smoothed: bool = True) -> np.ndarray:
    """Vega-scaled payoffs G~_i(z), shape (n_instruments, n_z); raw calls when not `smoothed`."""
    z = problem.grid.z
    if not problem.instruments:
        return np.zeros((0, problem.grid.n_z))
    epsilon = problem.epsilon if smoothed else None
    return np.stack([inst.scaled_payoff(z, epsilon) for inst in problem.instruments])


def apply_jump(phi: np.ndarray, lam: np.ndarray, indices: Sequence[int], payoffs: np.ndarray) -> np.ndarray:
    """phi + sum_i lam_i G~_i over the instruments maturing at this node; payoffs do not depend on r~."""
    out = np.array(phi, dtype=float)
    for i in indices:
        out += lam[i] * payoffs[i][:, None]
    return out


def _solve_checked(matrix, rhs: np.ndarray, tolerance: float, k: int) -> np.ndarray:
    lu = splu(matrix)
    x = lu.solve(rhs)
    scale = max(1.0, float(np.max(np.abs(rhs))))
    residual = float(np.max(np.abs(matrix @ x - rhs)))
    if residual > tolerance * scale:
        x = x + lu.solve(rhs - matrix @ x)
        residual = float(np.max(np.abs(matrix @ x - rhs)))
    if not np.all(np.isfinite(x)) or residual > tolerance * scale:
        raise NumericalError(f"linear solve did not reach tolerance, residual {residual:.3e}", time_index=k)
    logger.debug("HJB - linear solve k=%d residual=%.3e", k, residual)
    return x


def implicit_step(
    phi_next: np.ndarray,
    beta11: np.ndarray,
    k: int,
    problem: CalibrationProblem,
    anchor: np.ndarray | None = None,
    dt: float | None = None,
    coefficients: dict[str, np.ndarray | float] | None = None,
) -> np.ndarray:
    """One backward-Euler step of the HJB with the policy beta11 frozen.

    Solves (I - dt L_beta) phi_k = phi_{k+1} - dt H(beta11) on interior nodes;
    boundary rows freeze the normal second differences of `anchor`.
    `coefficients` replaces the model generator (test hook).
    """
    grid = problem.grid
    dt = problem.time_grid.dt if dt is None else dt
    if dt <= 0:
        raise ValueError("time step must be positive")
    ref = problem.reference
    s = ref.pole_at(k)
    if np.any(beta11 <= s):
        raise ValueError("policy beta11 must stay above the pole s")
    if coefficients is None:
        coefficients = model_coefficients(problem, k, beta11, reference_covariance(problem, k))
    operator = assemble_operator(grid, **coefficients)
    source = H(beta11, ref.sigma_bar_sq[k], s, ref.p)
    rhs = np.where(interior_mask(grid), phi_next - dt * source, 0.0).ravel()
    anchor = phi_next if anchor is None else anchor
    rhs = rhs + closure_rhs(grid, anchor)
    logger.debug("HJB - step k=%d diffusion number=%.3g", k, dt * float(np.max(beta11)) / grid.h_z**2)
    solution = _solve_checked(implicit_system(grid, operator, dt), rhs, problem.settings.linear_tolerance, k)
    return solution.reshape(grid.shape)


def policy_beta(phi: np.ndarray, k: int, problem: CalibrationProblem) -> np.ndarray:
    d = difference_arrays(phi, problem.grid.h_z, problem.grid.h_r)
    ref = problem.reference
    return optimal_beta11(
        d.f_zz - d.f_z, ref.sigma_bar_sq[k], ref.pole_at(k), ref.p,
        printed=problem.settings.printed_beta_formula,
    )


def policy_iteration_step_solve(
    phi_next: np.ndarray,
    k: int,
    problem: CalibrationProblem,
    anchor: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Alternate policy improvement and implicit evaluation on [t_k, t_{k+1}]."""
    settings = problem.settings
    guess = phi_next
    residuals: list[float] = []
    for iteration in range(1, settings.max_policy_iterations + 1):
        beta = policy_beta(guess, k, problem)
        new = implicit_step(phi_next, beta, k, problem, anchor=anchor)
        residual = float(np.max(np.abs(new - guess)))
        residuals.append(residual)
        guess = new
        if residual <= settings.policy_tolerance:
            break
    else:
        raise ConvergenceError(f"policy iteration did not converge at time index {k}", residual=residuals[-1])
    if len(residuals) > 2 and np.any(np.diff(residuals[1:]) > 0):
        logger.warning("HJB - non-monotone policy residuals at k=%d: %s", k, ["%.2e" % r for r in residuals])
    logger.debug("HJB - step k=%d policy iterations=%d residual=%.3e", k, iteration, residuals[-1])
    return guess, policy_beta(guess, k, problem), iteration


def solve_hjb(
    lam: np.ndarray,
    problem: CalibrationProblem,
    payoffs: np.ndarray | None = None,
    dump_dir: Path | None = None,
) -> HJBSolution:
    """Backward sweep of the dual HJB from phi(T) = 0 with jumps at the maturities."""
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (len(problem.instruments),):
        raise ValueError(f"expected {len(problem.instruments)} multipliers, got shape {lam.shape}")
    if not np.all(np.isfinite(lam)):
        raise ValueError("multipliers must be finite")
    grid, time_grid = problem.grid, problem.time_grid
    payoffs = jump_payoffs(problem) if payoffs is None else payoffs
    by_node = {k: problem.instruments_at(k) for k in time_grid.maturity_indices}

    n = time_grid.n_steps
    phi = np.zeros((n + 1, *grid.shape))
    beta = np.empty((n + 1, *grid.shape))
    iterations = np.zeros(n, dtype=int)
    current = phi[n]
    anchor = current
    for k in range(n - 1, -1, -1):
        if k + 1 in by_node:
            current = apply_jump(current, lam, by_node[k + 1], payoffs)
            anchor = current
        current, beta[k], iterations[k] = policy_iteration_step_solve(current, k, problem, anchor)
        if not np.all(np.isfinite(current)):
            raise NumericalError("non-finite HJB solution", time_index=k)
        phi[k] = current
    beta[n] = problem.reference.sigma_bar_sq[n]

    value = bilinear(grid, phi[0], problem.z0, problem.r0_scaled)
    logger.info(
        "HJB - solved: |lambda|=%.4g phi(0,Z0,r0)=%.10f mean policy iterations=%.2f",
        float(np.max(np.abs(lam), initial=0.0)), value, float(iterations.mean()),
    )
    solution = HJBSolution(phi, beta, value, iterations)
    if dump_dir is not None:
        dump_slices(solution, problem, dump_dir)
    return solution


def dump_slices(solution: HJBSolution, problem: CalibrationProblem, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for k in range(problem.time_grid.n_steps + 1):
        solution.phi_at(problem, k).to_csv(out_dir / f"phi_t{k}.csv")
        solution.beta11_at(problem, k).to_csv(out_dir / f"beta11_t{k}.csv")
    logger.info("HJB - dumped %d slices to %s", problem.time_grid.n_steps + 1, out_dir)


def discrete_residual(phi_k: np.ndarray, phi_next: np.ndarray, k: int, problem: CalibrationProblem) -> np.ndarray:
    """Interior residual of the full sup-form HJB at a computed slice (phi_next includes any jump)."""
    grid = problem.grid
    beta = policy_beta(phi_k, k, problem)
    ref = problem.reference
    operator = assemble_operator(grid, **model_coefficients(problem, k, beta, reference_covariance(problem, k)))
    generator = (operator @ phi_k.ravel()).reshape(grid.shape)
    residual = (phi_next - phi_k) / problem.time_grid.dt + generator - H(beta, ref.sigma_bar_sq[k], ref.pole_at(k), ref.p)
    return residual[1:-1, 1:-1]


def linearized_values(beta11: np.ndarray, problem: CalibrationProblem, payoffs: np.ndarray | None = None) -> np.ndarray:
    """d phi(0, Z0, r~0) / d lambda_i for every instrument, with the policy frozen at `beta11`.

    Each column carries G~_i backward through the same implicit matrices as
    solve_hjb, jumping at the instrument's maturity and re-anchoring the
    boundary closure at every maturity node. At the HJB policy this is the
    exact derivative of the discrete dual value; at beta11 = sigma_bar^2 it is
    the reference-model price of G~_i.
    """
    grid, time_grid = problem.grid, problem.time_grid
    payoffs = jump_payoffs(problem) if payoffs is None else payoffs
    n_instruments = len(problem.instruments)
    if n_instruments == 0:
        return np.zeros(0)
    last = max(problem.maturity_index(inst) for inst in problem.instruments)
    mask = interior_mask(grid).ravel()[:, None]
    closure = closure_matrix(grid)
    psi = np.zeros((grid.size, n_instruments))
    anchor = psi
    for k in range(last - 1, -1, -1):
        if k + 1 in time_grid.maturity_indices:
            for i in problem.instruments_at(k + 1):
                psi[:, i] += np.broadcast_to(payoffs[i][:, None], grid.shape).ravel()
            anchor = psi.copy()
        coefficients = model_coefficients(problem, k, beta11[k], reference_covariance(problem, k))
        matrix = implicit_system(grid, assemble_operator(grid, **coefficients), time_grid.dt)
        rhs = np.where(mask, psi, 0.0) + closure @ anchor
        psi = _solve_checked(matrix, rhs, problem.settings.linear_tolerance, k)
    return np.array([bilinear(grid, psi[:, i].reshape(grid.shape), problem.z0, problem.r0_scaled) for i in range(n_instruments)])
