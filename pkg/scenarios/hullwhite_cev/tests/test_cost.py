"""Variance penalty and its closed-form optimiser."""

import math
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[3]
sys.path.insert(0, str(ROOT))
sys.path.insert(0, str(ROOT / "src"))

from otcalib.cost import H, CharacteristicPoint, CostParams, H_prime, hamiltonian, optimal_beta11  # noqa: E402

P, S, X_BAR = 4.0, 0.05, 0.3


def test_penalty_vanishes_at_the_reference_and_is_nonnegative():
    assert H(X_BAR, X_BAR, S, P) == pytest.approx(0.0, abs=1e-12)
    x = np.linspace(S + 1e-4, 3.0, 2001)
    assert np.all(H(x, X_BAR, S, P) >= -1e-12)


def test_penalty_is_infinite_below_the_pole():
    assert H(0.01, X_BAR, S, P) == math.inf
    assert H(S, X_BAR, S, P) == math.inf
    with pytest.raises(ValueError):
        H_prime(0.01, X_BAR, S, P)


def test_derivative_matches_finite_differences():
    for x in (0.06, 0.2, 0.3, 0.9):
        h = 1e-6 * x
        fd = (H(x + h, X_BAR, S, P) - H(x - h, X_BAR, S, P)) / (2 * h)
        assert H_prime(x, X_BAR, S, P) == pytest.approx(fd, rel=1e-5, abs=1e-6)


@pytest.mark.parametrize("g", [-50.0, -5.0, 0.0, 5.0, 40.0])
def test_optimiser_attains_the_supremum(g):
    x = np.linspace(S + 1e-6, 0.9, 200_001)
    brute = np.max(0.5 * g * x - H(x, X_BAR, S, P))
    assert hamiltonian(0.0, g, X_BAR, S, P) == pytest.approx(brute, abs=1e-6)
    assert hamiltonian(0.0, g, X_BAR, S, P) >= brute - 1e-12


def test_optimiser_on_a_million_point_grid():
    p, x_bar, s, g = 4.0, 0.25, 0.0016, 1.0
    x = np.linspace(s, 10.0, 1_000_001)[1:]
    brute = np.max(0.5 * g * x - H(x, x_bar, s, p))
    assert hamiltonian(0.0, g, x_bar, s, p) == pytest.approx(brute, rel=1e-6)


def test_optimiser_across_random_draws():
    rng = np.random.default_rng(7)
    for _ in range(100):
        g = rng.uniform(-5.0, 5.0)
        x_bar = rng.uniform(0.2, 1.0)
        s = rng.uniform(0.0, x_bar - 0.1)
        p = rng.uniform(2.5, 5.0)
        x = np.linspace(s, 10.0, 1_000_001)[1:]
        brute = np.max(0.5 * g * x - H(x, x_bar, s, p))
        assert hamiltonian(0.0, g, x_bar, s, p) == pytest.approx(brute, abs=1e-6 * max(1.0, abs(brute)))


@pytest.mark.parametrize("g", [-1e4, -3.0, 0.5, 12.0, 1e4])
def test_optimiser_is_stationary(g):
    beta = optimal_beta11(g, X_BAR, S, P)
    assert beta > S
    assert H_prime(beta, X_BAR, S, P) == pytest.approx(0.5 * g, rel=1e-9, abs=1e-9)


def test_optimiser_is_vectorised_and_returns_the_reference_at_zero():
    g = np.array([[0.0, 1.0], [-1.0, 0.0]])
    beta = optimal_beta11(g, X_BAR, S, P)
    assert beta.shape == (2, 2)
    assert beta[0, 0] == pytest.approx(X_BAR)
    assert beta[0, 1] > X_BAR > beta[1, 0]


def test_printed_variant_drops_the_width_factor():
    g = 7.0
    expected = S + (X_BAR - S) * math.exp(math.asinh(g / (4 * (P**2 - 1))) / P)
    assert optimal_beta11(g, X_BAR, S, P, printed=True) == pytest.approx(expected)
    assert optimal_beta11(g, X_BAR, S, P) != pytest.approx(expected)


def test_optimiser_rejects_bad_inputs():
    with pytest.raises(ValueError):
        optimal_beta11(np.nan, X_BAR, S, P)
    with pytest.raises(ValueError):
        optimal_beta11(1.0, S, S, P)


def test_hamiltonian_at_rest():
    assert hamiltonian(0.0, 0.0, X_BAR, S, P) == pytest.approx(0.0, abs=1e-14)
    # phi_z shifts g in the opposite direction
    assert hamiltonian(1.0, 1.0, X_BAR, S, P) == pytest.approx(0.0, abs=1e-14)


def test_cost_params_validation():
    CostParams(P, S, X_BAR)
    with pytest.raises(ValueError):
        CostParams(2.0, S, X_BAR)
    with pytest.raises(ValueError):
        CostParams(P, 0.4, X_BAR)


def test_characteristic_point_recovers_the_correlation():
    sigma_r, beta11 = 0.05, 0.25
    xi = -0.4 * math.sqrt(beta11) / sigma_r
    point = CharacteristicPoint.at(beta11, xi, sigma_r, r=0.02, hw_drift=0.01)
    assert point.correlation == pytest.approx(-0.4)
    assert point.alpha1 == pytest.approx(0.02 - 0.125)
    assert point.is_admissible(xi**2 * sigma_r**2)
    assert not point.is_admissible(0.3)


def main():
    sys.exit(pytest.main([__file__, "-q"]))


if __name__ == "__main__":
    main()
