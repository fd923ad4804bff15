import numpy as np
import pytest

from wildgas import torus
from wildgas.ansatz import (
    build_ansatz,
    build_time_pulse,
    continuity_residual,
    preset_data,
)
from wildgas.torus import GridSpec


def scan_smallest_k(t_final, div_sup, rho_lower):
    """Oracle: scan k = 1, 2, ... checking the positivity inequality."""
    k = 1
    while t_final / (k * np.pi) * div_sup >= rho_lower / 2.0:
        k += 1
    return k


def test_pulse_k_trivial_when_divergence_free():
    pulse = build_time_pulse(1.0, 0.0, 1.0)
    assert pulse.k == 1
    t = np.linspace(0, 1, 11)
    assert np.allclose(pulse(t), np.sin(np.pi * t) / np.pi)


def test_pulse_k_scan_example():
    # T = 1, sup|div(rho0 u0)| = 10, rho_lower = 1
    pulse = build_time_pulse(1.0, 10.0, 1.0)
    assert pulse.k == scan_smallest_k(1.0, 10.0, 1.0) == 7


@pytest.mark.parametrize("div_sup,t_final,rho_lower",
                         [(3.0, 1.0, 0.5), (17.2, 0.25, 1.1), (0.01, 4.0, 2.0)])
def test_pulse_k_matches_scan_oracle(div_sup, t_final, rho_lower):
    pulse = build_time_pulse(t_final, div_sup, rho_lower)
    assert pulse.k == scan_smallest_k(t_final, div_sup, rho_lower)
    assert pulse.sup * div_sup < rho_lower / 2.0


def test_pulse_boundary_conditions():
    pulse = build_time_pulse(0.7, 5.0, 1.3)
    assert pulse(0.0) == 0.0
    assert abs(pulse.deriv(0.0) - 1.0) <= 1e-10
    assert abs(pulse(0.7)) <= 1e-15


def test_ansatz_u0_zero_is_static(grid2d):
    rho0, _, _ = preset_data("analytic", grid2d)
    ans = build_ansatz(grid2d, rho0, np.zeros((2,) + grid2d.spatial_shape))
    assert np.max(np.abs(ans.rho_tilde - rho0)) <= 1e-12
    assert torus.max_norm(ans.psi) <= 1e-12
    assert continuity_residual(ans) <= 1e-14


def test_ansatz_divergence_free_momentum_is_static(grid2d, rng):
    rho0 = np.full(grid2d.spatial_shape, 1.5)
    w = rng.standard_normal((2,) + grid2d.spatial_shape)
    u0, _ = torus.helmholtz(w, grid2d)  # div(rho0 u0) = rho0 div u0 = 0
    ans = build_ansatz(grid2d, rho0, u0)
    assert np.max(np.abs(ans.rho_tilde - rho0)) <= 1e-9
    assert torus.max_norm(ans.psi) <= 1e-10


def test_ansatz_initial_slice_recovers_data(grid2d):
    rho0, _, u0 = preset_data("analytic", grid2d)
    ans = build_ansatz(grid2d, rho0, u0)
    # rho_tilde(0) = rho0 exactly since h(0) = 0
    assert np.array_equal(ans.rho_tilde_at(0.0), rho0)
    # v0 + grad_psi0 reconstructs the initial momentum
    w0 = ans.v0 + ans.grad_psi0
    assert np.max(np.abs(w0 - rho0 * u0)) <= 1e-9
    assert torus.max_norm(torus.divergence(ans.v0, grid2d)) <= 1e-10


def test_ansatz_positivity_margin(grid2d):
    rho0, _, u0 = preset_data("analytic", grid2d)
    ans = build_ansatz(grid2d, rho0, u0)
    assert ans.rho_tilde_min > ans.rho_lower / 2.0
    assert ans.rho_tilde.max() < ans.rho_tilde_max + 1e-12


def test_continuity_residual_analytic_preset(grid2d):
    rho0, _, u0 = preset_data("analytic", grid2d)
    ans = build_ansatz(grid2d, rho0, u0)
    assert continuity_residual(ans) <= 1e-8


def symbolic_continuity_residual(ans, grid):
    """Oracle: assemble d/dt rho_tilde + Laplace(Psi) from closed forms.

    For the analytic preset div(rho0 u0) = d/dx1[(2 + cos a) sin a] with
    a = 2 pi x1, i.e. 2 pi (2 cos a + cos 2a).  Psi picks the matching
    inverse-Laplacian coefficients mode by mode.
    """
    mesh = grid.meshes()
    a = 2 * np.pi * mesh[0]
    zero = sum(0 * m for m in mesh)
    div_exact = 2 * np.pi * (2 * np.cos(a) + np.cos(2 * a)) + zero
    # Laplace(Psi) = h'(t) div_exact must cancel d/dt rho_tilde = -h' div_exact
    worst = 0.0
    for t in grid.times:
        hp = ans.pulse.deriv(t)
        lap_psi = hp * torus.laplacian(ans.psi0, grid)
        resid = -hp * div_exact + lap_psi
        worst = max(worst, torus.max_norm(resid))
    return worst


def test_continuity_residual_symbolic_oracle(grid2d):
    rho0, _, u0 = preset_data("analytic", grid2d)
    ans = build_ansatz(grid2d, rho0, u0)
    assert symbolic_continuity_residual(ans, grid2d) <= 1e-8


def test_continuity_residual_independent_of_n_time():
    rho0 = None
    vals = []
    for n_time in (5, 17, 65):
        grid = GridSpec(2, 32, n_time, 1.0)
        rho0, _, u0 = preset_data("analytic", grid)
        ans = build_ansatz(grid, rho0, u0)
        vals.append(continuity_residual(ans))
    assert max(vals) - min(vals) <= 1e-13


def test_build_ansatz_rejects_nonpositive_density(grid2d):
    rho0, _, u0 = preset_data("analytic", grid2d)
    with pytest.raises(ValueError):
        build_ansatz(grid2d, rho0 - 3.0, u0)


def test_presets_are_positive(grid2d, grid3d):
    for name in ("equilibrium", "analytic", "wild", "dissipative"):
        for grid in (grid2d, grid3d):
            rho0, theta0, u0 = preset_data(name, grid)
            assert rho0.shape == grid.spatial_shape
            assert theta0.shape == grid.spatial_shape
            assert u0.shape == (grid.dim,) + grid.spatial_shape
            assert rho0.min() > 0 and theta0.min() > 0


def test_unknown_preset_rejected(grid2d):
    with pytest.raises(KeyError):
        preset_data("nope", grid2d)
