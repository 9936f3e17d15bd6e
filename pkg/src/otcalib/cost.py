"""Penalty H on the stock variance, its derivative, and the closed-form optimiser.

All functions are vectorised over numpy arrays. x, x_bar and s are variance
rates (1/years); the constraint set keeps x strictly above the pole
s = xi_ref^2 sigma_r^2, outside of which H is +inf.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CostParams:
    p: float
    s: float
    x_bar: float

    def __post_init__(self) -> None:
        if self.p <= 2:
            raise ValueError(f"cost exponent p must exceed 2, got {self.p}")
        if not self.x_bar > self.s >= 0:
            raise ValueError(f"need x_bar > s >= 0, got x_bar={self.x_bar} s={self.s}")


@dataclass(frozen=True)
class CharacteristicPoint:
    """One admissible (alpha, beta) of the constraint set at a state (r, b - a r)."""

    beta11: float
    beta12: float
    alpha1: float
    alpha2: float
    sigma_r: float

    @classmethod
    def at(cls, beta11: float, xi_ref: float, sigma_r: float, r: float, hw_drift: float) -> CharacteristicPoint:
        return cls(beta11, xi_ref * sigma_r**2, r - 0.5 * beta11, hw_drift, sigma_r)

    @property
    def correlation(self) -> float:
        return self.beta12 / (self.sigma_r * np.sqrt(self.beta11))

    def is_admissible(self, s: float) -> bool:
        det = self.beta11 * self.sigma_r**2 - self.beta12**2
        return self.beta11 > s and det >= -1e-14 * self.beta11 * self.sigma_r**2


def _log_ratio(x, x_bar, s):
    return np.log(x - s) - np.log(x_bar - s)


def H(x, x_bar, s, p: float):
    """(p-1) u^(1+p) + (p+1) u^(1-p) - 2p with u = (x-s)/(x_bar-s); +inf off the domain."""
    x, x_bar, s = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, x_bar, s)))
    inside = (x > s) & (x_bar > s)
    with np.errstate(over="ignore"):
        log_u = _log_ratio(np.where(inside, x, s + 1.0), np.where(inside, x_bar, s + 1.0), s)
        value = (p - 1.0) * np.exp((1.0 + p) * log_u) + (p + 1.0) * np.exp((1.0 - p) * log_u) - 2.0 * p
    out = np.where(inside, value, np.inf)
    return out[()] if out.ndim == 0 else out


def H_prime(x, x_bar, s, p: float):
    """dH/dx = (p^2-1)(u^p - u^-p)/(x_bar-s)."""
    x, x_bar, s = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, x_bar, s)))
    if np.any(x <= s) or np.any(x_bar <= s):
        raise ValueError("H_prime is only defined for x, x_bar > s")
    log_u = _log_ratio(x, x_bar, s)
    out = (p**2 - 1.0) * 2.0 * np.sinh(p * log_u) / (x_bar - s)
    return out[()] if out.ndim == 0 else out


def optimal_beta11(g, x_bar, s, p: float, printed: bool = False):
    """Unique x > s with g/2 = H'(x); g is phi_zz - phi_z.

    With k = g (x_bar-s) / (4(p^2-1)) the stationarity condition is
    u^p - u^-p = 2k, so u^p = k + sqrt(k^2+1) = exp(asinh k). `printed`
    drops the (x_bar-s) factor from k for comparison runs.
    """
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValueError("optimal_beta11 needs finite phi_zz - phi_z")
    x_bar = np.asarray(x_bar, dtype=float)
    s = np.asarray(s, dtype=float)
    width = x_bar - s
    if np.any(width <= 0):
        raise ValueError("optimal_beta11 needs x_bar > s")
    k = g / (4.0 * (p**2 - 1.0))
    if not printed:
        k = k * width
    out = s + width * np.exp(np.arcsinh(k) / p)
    return out[()] if out.ndim == 0 else out


def hamiltonian(phi_z, phi_zz, x_bar, s, p: float, printed: bool = False):
    """sup over beta11 of g beta11 / 2 - H(beta11), attained at optimal_beta11."""
    g = np.asarray(phi_zz, dtype=float) - np.asarray(phi_z, dtype=float)
    beta = optimal_beta11(g, x_bar, s, p, printed=printed)
    return 0.5 * g * beta - H(beta, x_bar, s, p)
