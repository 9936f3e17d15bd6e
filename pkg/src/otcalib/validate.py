"""Monte-Carlo simulation of the model dynamics and checks of the discounted density.

Paths are simulated in (Z, r) with the real (unscaled) short rate; surface
look-ups convert to r~ = R r. Every path carries the trapezoidal integral of
r, so exp(-integral) weights give discounted expectations and the discounted
density rho(t, .) as a weighted histogram.
"""

from __future__ import annotations

import asyncio
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import pandas as pd

from otcalib.grid import SpatialGrid2D, bilinear
from otcalib.market import CalibrationProblem, cev_local_variance
from otcalib.models import GeneratingModel
from otcalib.pricing import ModelSurfaces

logger = logging.getLogger(__name__)

CLAMP_WARN_FRACTION = 1e-3


# ---------- Dynamics ----------


class Dynamics(Protocol):
    a: float
    sigma_r: float

    def b(self, t: float) -> float: ...

    def covariance(self, k: int, z: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...

    def outside(self, z: np.ndarray, r: np.ndarray) -> int: ...


class SurfaceDynamics:
    """Characteristics read off calibrated surfaces by clamped bilinear interpolation."""

    def __init__(self, surfaces: ModelSurfaces, problem: CalibrationProblem):
        self.surfaces = surfaces
        self.grid = problem.grid
        self.hw = problem.hw
        self.a = problem.hw.a
        self.sigma_r = problem.hw.sigma_r
        self._last = surfaces.n_nodes - 1

    def b(self, t: float) -> float:
        return float(self.hw.b(t))

    def covariance(self, k: int, z: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        k = min(k, self._last)
        r_scaled = r * self.hw.rescale
        beta11 = bilinear(self.grid, self.surfaces.beta11[k], z, r_scaled)
        beta12 = bilinear(self.grid, self.surfaces.beta12[k], z, r_scaled)
        return np.asarray(beta11), np.asarray(beta12)

    def outside(self, z: np.ndarray, r: np.ndarray) -> int:
        g = self.grid
        r_scaled = r * self.hw.rescale
        return int(np.count_nonzero((z < g.z_min) | (z > g.z_max) | (r_scaled < g.r_min) | (r_scaled > g.r_max)))


class CEVDynamics:
    """The generating model evaluated exactly at every path state."""

    def __init__(self, generating: GeneratingModel, problem: CalibrationProblem):
        self.generating = generating
        self.hw = problem.hw
        self.a = problem.hw.a
        self.sigma_r = problem.hw.sigma_r

    def b(self, t: float) -> float:
        return float(self.hw.b(t))

    def covariance(self, k: int, z: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        variance = cev_local_variance(z, self.generating.sigma, self.generating.gamma)
        return variance, self.generating.correlation * np.sqrt(variance) * self.sigma_r

    def outside(self, z: np.ndarray, r: np.ndarray) -> int:
        return 0


def dynamics_for(model: ModelSurfaces | GeneratingModel | Dynamics, problem: CalibrationProblem) -> Dynamics:
    if isinstance(model, ModelSurfaces):
        return SurfaceDynamics(model, problem)
    if isinstance(model, GeneratingModel):
        return CEVDynamics(model, problem)
    return model


# ---------- Paths ----------


@dataclass(frozen=True, eq=False)
class PathBatch:
    """Simulated states on the time nodes, arrays of shape (n_paths, n_steps + 1)."""

    times: np.ndarray = field(repr=False)
    z: np.ndarray = field(repr=False)
    r: np.ndarray = field(repr=False)
    integral: np.ndarray = field(repr=False)
    seed: int
    clamped_correlations: int = 0
    outside_lookups: int = 0

    def __post_init__(self) -> None:
        for name in ("z", "r", "integral"):
            arr = getattr(self, name)
            if arr.shape != (self.n_paths, len(self.times)):
                raise ValueError(f"paths: {name} has shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"paths: non-finite {name}")

    @property
    def n_paths(self) -> int:
        return self.z.shape[0]

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def index_of(self, t: float) -> int:
        k = int(round(t / self.dt))
        if not 0 <= k <= self.n_steps or abs(self.times[k] - t) > 1e-9 * max(1.0, t):
            raise ValueError(f"time {t} is not a simulated node (horizon {self.times[-1]:.6g})")
        return k

    def discount(self, k: int) -> np.ndarray:
        return np.exp(-self.integral[:, k])

    def stock(self, k: int) -> np.ndarray:
        return np.exp(self.z[:, k])


def _simulate_block(
    dyn: Dynamics,
    n_paths: int,
    n_steps: int,
    dt: float,
    z0: float,
    r0: float,
    seed: np.random.SeedSequence,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, int, int]:
    rng = np.random.Generator(np.random.Philox(seed))
    z = np.empty((n_paths, n_steps + 1))
    r = np.empty((n_paths, n_steps + 1))
    integral = np.zeros((n_paths, n_steps + 1))
    z[:, 0], r[:, 0] = z0, r0
    sqrt_dt = math.sqrt(dt)
    clamped = outside = 0
    for k in range(n_steps):
        zk, rk = z[:, k], r[:, k]
        eps = rng.standard_normal((2, n_paths))
        beta11, beta12 = dyn.covariance(k, zk, rk)
        beta11 = np.maximum(beta11, 0.0)
        vol = np.sqrt(beta11)
        denom = dyn.sigma_r * vol
        xi = np.divide(beta12, denom, out=np.zeros(n_paths), where=denom > 0)
        clamped += int(np.count_nonzero(np.abs(xi) > 1.0))
        xi = np.clip(xi, -1.0, 1.0)
        outside += dyn.outside(zk, rk)
        dw1 = sqrt_dt * eps[0]
        dw2 = sqrt_dt * (xi * eps[0] + np.sqrt(1.0 - xi**2) * eps[1])
        z[:, k + 1] = zk + (rk - 0.5 * beta11) * dt + vol * dw1
        r[:, k + 1] = rk + (dyn.b(k * dt) - dyn.a * rk) * dt + dyn.sigma_r * dw2
        integral[:, k + 1] = integral[:, k] + 0.5 * (rk + r[:, k + 1]) * dt
    return z, r, integral, clamped, outside


async def simulate_async(
    model: ModelSurfaces | GeneratingModel | Dynamics,
    problem: CalibrationProblem,
    n_paths: int | None = None,
    seed: int | None = None,
    n_blocks: int | None = None,
    n_steps: int | None = None,
) -> PathBatch:
    """Euler-Maruyama paths from (ln s0, r0), one worker thread per block of paths.

    Each block draws from its own Philox stream spawned from `seed`; blocks are
    concatenated in spawn order, so the batch depends only on the seed and the
    block count.
    """
    settings = problem.settings
    n_paths = settings.n_paths if n_paths is None else n_paths
    seed = settings.seed if seed is None else seed
    n_blocks = min(settings.path_blocks if n_blocks is None else n_blocks, n_paths)
    n_steps = problem.time_grid.n_steps if n_steps is None else n_steps
    if n_paths < 1 or n_blocks < 1 or n_steps < 1:
        raise ValueError("simulation needs at least one path, block and step")
    dt = problem.time_grid.dt
    dyn = dynamics_for(model, problem)
    sizes = [len(chunk) for chunk in np.array_split(np.arange(n_paths), n_blocks)]
    streams = np.random.SeedSequence(seed).spawn(n_blocks)
    blocks = await asyncio.gather(
        *(
            asyncio.to_thread(_simulate_block, dyn, size, n_steps, dt, problem.z0, problem.hw.r0, stream)
            for size, stream in zip(sizes, streams)
        )
    )
    clamped = sum(b[3] for b in blocks)
    outside = sum(b[4] for b in blocks)
    batch = PathBatch(
        times=np.arange(n_steps + 1) * dt,
        z=np.concatenate([b[0] for b in blocks]),
        r=np.concatenate([b[1] for b in blocks]),
        integral=np.concatenate([b[2] for b in blocks]),
        seed=seed,
        clamped_correlations=clamped,
        outside_lookups=outside,
    )
    total = n_paths * n_steps
    if clamped > CLAMP_WARN_FRACTION * total:
        logger.warning("VALIDATE - clamped correlation on %d of %d path steps", clamped, total)
    if outside:
        logger.info("VALIDATE - %.3f%% of surface look-ups clamped to the grid", 100.0 * outside / total)
    logger.info("VALIDATE - simulated %d paths x %d steps (seed %d, %d blocks)", n_paths, n_steps, seed, n_blocks)
    return batch


def euler_simulate(
    model: ModelSurfaces | GeneratingModel | Dynamics,
    problem: CalibrationProblem,
    n_paths: int | None = None,
    seed: int | None = None,
    n_blocks: int | None = None,
    n_steps: int | None = None,
) -> PathBatch:
    return asyncio.run(simulate_async(model, problem, n_paths, seed, n_blocks, n_steps))


# ---------- Expectations ----------


def mc_price(batch: PathBatch, payoff: Callable[[np.ndarray, np.ndarray], np.ndarray], maturity: float) -> tuple[float, float]:
    """Discounted mean of payoff(Z_tau, r_tau) and its standard error."""
    k = batch.index_of(maturity)
    samples = batch.discount(k) * np.broadcast_to(payoff(batch.z[:, k], batch.r[:, k]), (batch.n_paths,))
    se = float(samples.std(ddof=1) / math.sqrt(batch.n_paths)) if batch.n_paths > 1 else 0.0
    return float(samples.mean()), se


def discounted_mass(batch: PathBatch, k: int) -> tuple[float, float]:
    """<1, rho(t_k)> with its standard error; a bond price estimate."""
    w = batch.discount(k)
    return float(w.mean()), float(w.std(ddof=1) / math.sqrt(batch.n_paths)) if batch.n_paths > 1 else 0.0


# ---------- Test functions ----------


class SmoothFunction(Protocol):
    name: str

    def value(self, z: np.ndarray, r: np.ndarray) -> np.ndarray: ...

    def gradient(self, z: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...

    def hessian(self, z: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]: ...


@dataclass(frozen=True)
class GaussianBump:
    """exp(-((z-z_c)/w_z)^2/2 - ((r-r_c)/w_r)^2/2) in (log-price, real rate)."""

    z_c: float
    r_c: float
    width_z: float
    width_r: float
    name: str = "bump"

    def __post_init__(self) -> None:
        if self.width_z <= 0 or self.width_r <= 0:
            raise ValueError("bump widths must be positive")

    def value(self, z, r):
        return np.exp(-0.5 * (((z - self.z_c) / self.width_z) ** 2 + ((r - self.r_c) / self.width_r) ** 2))

    def gradient(self, z, r):
        v = self.value(z, r)
        return -v * (z - self.z_c) / self.width_z**2, -v * (r - self.r_c) / self.width_r**2

    def hessian(self, z, r):
        v = self.value(z, r)
        dz = (z - self.z_c) / self.width_z**2
        dr = (r - self.r_c) / self.width_r**2
        return v * (dz**2 - 1.0 / self.width_z**2), v * dz * dr, v * (dr**2 - 1.0 / self.width_r**2)


@dataclass(frozen=True)
class Constant:
    level: float = 1.0
    name: str = "constant"

    def value(self, z, r):
        return np.full(np.shape(z), self.level)

    def gradient(self, z, r):
        return np.zeros(np.shape(z)), np.zeros(np.shape(z))

    def hessian(self, z, r):
        zero = np.zeros(np.shape(z))
        return zero, zero, zero


def bump_ladder(problem: CalibrationProblem, count: int = 5, width_z: float = 0.1, width_r: float = 0.015) -> list[GaussianBump]:
    """Bumps along the anti-diagonal through (Z0, r0), spot +-15% in log price and r0 -+1%."""
    z_centres = problem.z0 + np.linspace(-0.15, 0.15, count)
    r_centres = problem.hw.r0 + np.linspace(0.01, -0.01, count)
    return [
        GaussianBump(float(z), float(r), width_z, width_r, name=f"bump_{i}")
        for i, (z, r) in enumerate(zip(z_centres, r_centres))
    ]


def quarter_times(n_steps: int, lag: int = 1, count: int = 4) -> list[int]:
    """Time indices at 1/count, ..., count/count of the horizon, kept clear of the ends."""
    if n_steps < 2 * lag:
        raise ValueError("not enough steps for the central difference")
    return sorted({min(max(round(q * n_steps / count), lag), n_steps - lag) for q in range(1, count + 1)})


def apply_generator(dyn: Dynamics, k: int, t: float, fn: SmoothFunction, z: np.ndarray, r: np.ndarray) -> np.ndarray:
    """(alpha . grad + beta : hess / 2 - r) fn at the states (z, r)."""
    beta11, beta12 = dyn.covariance(k, z, r)
    f_z, f_r = fn.gradient(z, r)
    f_zz, f_zr, f_rr = fn.hessian(z, r)
    drift = (r - 0.5 * beta11) * f_z + (dyn.b(t) - dyn.a * r) * f_r
    diffusion = 0.5 * beta11 * f_zz + beta12 * f_zr + 0.5 * dyn.sigma_r**2 * f_rr
    return drift + diffusion - r * fn.value(z, r)


# ---------- Discounted Fokker-Planck check ----------


@dataclass(frozen=True)
class FPResidual:
    t: float
    testfn_id: str
    lhs: float
    rhs: float
    err_bar: float

    @property
    def residual(self) -> float:
        return self.lhs - self.rhs

    @property
    def within(self) -> bool:
        return abs(self.residual) <= self.err_bar


def discounted_fp_residual(
    batch: PathBatch,
    model: ModelSurfaces | GeneratingModel | Dynamics,
    problem: CalibrationProblem,
    test_functions: Sequence[SmoothFunction],
    time_indices: Sequence[int] | None = None,
    lag: int = 1,
    n_sigma: float = 3.0,
) -> list[FPResidual]:
    """Weak-form check d/dt <fn, rho> = <L* fn, rho> on a ladder of times.

    The left side is a central difference of weighted path averages over
    +-lag steps; the right side averages the discounted generator at t. The
    error bar adds n_sigma standard errors of the per-path difference to the
    change of the right side across the difference window.
    """
    if lag < 1:
        raise ValueError("lag must be at least one step")
    if batch.n_steps < 2 * lag:
        raise ValueError("not enough steps for the central difference")
    dyn = dynamics_for(model, problem)
    if time_indices is None:
        time_indices = sorted(set(np.linspace(lag, batch.n_steps - lag, 5).astype(int).tolist()))
    dt, n = batch.dt, batch.n_paths
    rows = []
    for k in time_indices:
        if not lag <= k <= batch.n_steps - lag:
            raise ValueError(f"time index {k} leaves no room for the central difference")
        for fn in test_functions:
            before = batch.discount(k - lag) * fn.value(batch.z[:, k - lag], batch.r[:, k - lag])
            after = batch.discount(k + lag) * fn.value(batch.z[:, k + lag], batch.r[:, k + lag])
            lhs_paths = (after - before) / (2 * lag * dt)

            def rhs_at(j: int) -> np.ndarray:
                return batch.discount(j) * apply_generator(dyn, j, batch.times[j], fn, batch.z[:, j], batch.r[:, j])

            rhs_paths = rhs_at(k)
            diff = lhs_paths - rhs_paths
            se = float(diff.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
            fd = 0.5 * abs(float(rhs_at(k + lag).mean() - rhs_at(k - lag).mean()))
            rows.append(FPResidual(float(batch.times[k]), fn.name, float(lhs_paths.mean()), float(rhs_paths.mean()), n_sigma * se + fd))
    failed = [row for row in rows if not row.within]
    if failed:
        logger.warning("VALIDATE - %d of %d Fokker-Planck checks outside their error bars", len(failed), len(rows))
    return rows


# ---------- Density estimate ----------


@dataclass(frozen=True, eq=False)
class DensityEstimate:
    """Histogram densities in (z, r~) per unit area: marginal rho_bar and discounted rho."""

    t: float
    z_edges: np.ndarray = field(repr=False)
    r_edges: np.ndarray = field(repr=False)
    counts: np.ndarray = field(repr=False)
    marginal: np.ndarray = field(repr=False)
    discounted: np.ndarray = field(repr=False)
    marginal_se: np.ndarray = field(repr=False)
    discounted_se: np.ndarray = field(repr=False)

    @property
    def areas(self) -> np.ndarray:
        return np.outer(np.diff(self.z_edges), np.diff(self.r_edges))

    def masses(self) -> tuple[float, float]:
        return float((self.marginal * self.areas).sum()), float((self.discounted * self.areas).sum())

    @property
    def defect(self) -> np.ndarray:
        """D = rho / rho_bar where paths were observed."""
        return np.divide(self.discounted, self.marginal, out=np.full(self.marginal.shape, np.nan), where=self.counts > 0)

    def to_frame(self) -> pd.DataFrame:
        zc = 0.5 * (self.z_edges[1:] + self.z_edges[:-1])
        rc = 0.5 * (self.r_edges[1:] + self.r_edges[:-1])
        z, r = np.meshgrid(zc, rc, indexing="ij")
        return pd.DataFrame({
            "t": self.t,
            "z": z.ravel(),
            "r": r.ravel(),
            "count": self.counts.ravel(),
            "rho_bar": self.marginal.ravel(),
            "rho_bar_se": self.marginal_se.ravel(),
            "rho": self.discounted.ravel(),
            "rho_se": self.discounted_se.ravel(),
        })


def _cell_edges(nodes: np.ndarray) -> np.ndarray:
    mid = 0.5 * (nodes[1:] + nodes[:-1])
    return np.concatenate([[nodes[0] - (mid[0] - nodes[0])], mid, [nodes[-1] + (nodes[-1] - mid[-1])]])


def estimate_density(batch: PathBatch, k: int, grid: SpatialGrid2D, rescale: float = 100.0) -> DensityEstimate:
    """Bin the states at t_k into cells centred on the grid nodes."""
    z_edges, r_edges = _cell_edges(grid.z), _cell_edges(grid.r)
    z, r = batch.z[:, k], batch.r[:, k] * rescale
    w = batch.discount(k)
    n = batch.n_paths
    bins = (z_edges, r_edges)
    counts, _, _ = np.histogram2d(z, r, bins=bins)
    w_sum, _, _ = np.histogram2d(z, r, bins=bins, weights=w)
    w_sq, _, _ = np.histogram2d(z, r, bins=bins, weights=w**2)
    areas = np.outer(np.diff(z_edges), np.diff(r_edges))
    p = counts / n
    mean_w = w_sum / n
    return DensityEstimate(
        t=float(batch.times[k]),
        z_edges=z_edges,
        r_edges=r_edges,
        counts=counts,
        marginal=p / areas,
        discounted=mean_w / areas,
        marginal_se=np.sqrt(p * (1.0 - p) / n) / areas,
        discounted_se=np.sqrt(np.maximum(w_sq / n - mean_w**2, 0.0) / n) / areas,
    )


# ---------- Output ----------


def write_paths_sample(batch: PathBatch, path: str | Path, n: int = 100) -> None:
    n = min(n, batch.n_paths)
    ids, steps = np.meshgrid(np.arange(n), np.arange(batch.n_steps + 1), indexing="ij")
    frame = pd.DataFrame({
        "t": batch.times[steps.ravel()],
        "path_id": ids.ravel(),
        "S": np.exp(batch.z[:n].ravel()),
        "r": batch.r[:n].ravel(),
    })
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")


def write_density_check(rows: Sequence[FPResidual], path: str | Path) -> None:
    frame = pd.DataFrame(
        [{"t": row.t, "testfn_id": row.testfn_id, "lhs": row.lhs, "rhs": row.rhs, "err_bar": row.err_bar} for row in rows],
        columns=["t", "testfn_id", "lhs", "rhs", "err_bar"],
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
