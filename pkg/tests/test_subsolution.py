import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wildgas import heat, torus
from wildgas.ansatz import build_ansatz, preset_data
from wildgas.subsolution import (
    BoundViolated,
    NotTraceFree,
    WeakTopologyMetric,
    choose_flat_energy,
    constraint_gap,
    effective_energy,
    eigmax_symmetric,
    energy_deficit,
    equality_flux,
    inf_gap_over,
    kinetic_inequality_check,
    lambda_max,
    linear_system_residual,
    membership_verdict,
    velocity_sup_bound,
)
from wildgas.torus import GridSpec


# ---------------------------------------------------------------------------
# eigenvalue oracle: power iteration with deflation


def power_eigs(m, iters=6000):
    """All eigenvalues of one symmetric matrix by shifted power iteration
    with deflation; independent of the closed form under test."""
    d = m.shape[0]
    shift = float(np.abs(m).sum(axis=1).max()) + 1.0
    b = m + shift * np.eye(d)
    eigs = []
    rng = np.random.default_rng(12345)
    for _ in range(d):
        x = rng.standard_normal(d)
        for _ in range(iters):
            y = b @ x
            n = np.linalg.norm(y)
            if n == 0:
                break
            x = y / n
        lam = float(x @ b @ x)
        eigs.append(lam - shift)
        b = b - lam * np.outer(x, x)
    return np.array(eigs)


def random_tracefree(rng, d, size):
    m = rng.standard_normal((size, d, d))
    m = 0.5 * (m + m.transpose(0, 2, 1))
    m -= (np.trace(m, axis1=1, axis2=2) / d)[:, None, None] * np.eye(d)
    return m


def test_lambda_max_examples():
    assert lambda_max(np.diag([2.0, -1.0, -1.0])) == pytest.approx(2.0, abs=1e-14)
    assert lambda_max(np.zeros((3, 3))) == 0.0
    w = np.array([1.0, 0.0, 0.0])
    m = np.outer(w, w) - np.eye(3) / 3.0
    assert lambda_max(m) == pytest.approx(2.0 / 3.0, abs=1e-14)


def test_lambda_max_rejects_trace(grid2d):
    with pytest.raises(NotTraceFree):
        lambda_max(np.eye(3))


@pytest.mark.parametrize("d", [2, 3])
def test_lambda_max_matches_power_iteration_oracle(d, rng):
    ms = random_tracefree(rng, d, 40)
    ours = lambda_max(ms, trace_tol=1e-10)
    for m, lam in zip(ms, ours):
        ref = power_eigs(m).max()
        assert abs(lam - ref) <= 1e-10


@given(s=st.floats(min_value=0.0, max_value=1e3), seed=st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_lambda_max_homogeneous_degree_one(s, seed):
    m = random_tracefree(np.random.default_rng(seed), 3, 1)[0]
    lhs = eigmax_symmetric(s * m)
    rhs = s * eigmax_symmetric(m)
    assert abs(lhs - rhs) <= 1e-9 * max(1.0, s)


@pytest.mark.parametrize("d", [2, 3])
def test_lambda_max_lipschitz_in_operator_norm(d, rng):
    for _ in range(200):
        a = random_tracefree(rng, d, 1)[0]
        b = random_tracefree(rng, d, 1)[0]
        diff = a - b
        opnorm = max(eigmax_symmetric(diff), eigmax_symmetric(-diff))
        assert abs(eigmax_symmetric(a) - eigmax_symmetric(b)) <= opnorm + 1e-12


# ---------------------------------------------------------------------------
# kinetic inequality


def test_kinetic_inequality_equality_case():
    w = np.array([0.7, -0.3, 1.1])
    rho = 1.7
    u = equality_flux(w, rho)
    lhs, rhs, flag = kinetic_inequality_check(w, u, rho)
    assert lhs == pytest.approx(rhs, abs=1e-12)
    assert flag


def test_kinetic_inequality_zero_flux_2d():
    # planar case: the prefactor degenerates to d/2 = 1
    w = np.array([1.0, 0.0])
    lhs, rhs, flag = kinetic_inequality_check(w, np.zeros((2, 2)), 1.0)
    assert lhs == pytest.approx(0.5, abs=1e-15)
    assert rhs == pytest.approx(1.0, abs=1e-15)
    assert not flag


def test_kinetic_inequality_zero_flux_3d():
    w = np.array([1.0, 0.0, 0.0])
    lhs, rhs, flag = kinetic_inequality_check(w, np.zeros((3, 3)), 1.0)
    assert lhs == pytest.approx(0.5, abs=1e-15)
    assert rhs == pytest.approx(1.5, abs=1e-15)


@pytest.mark.parametrize("d", [2, 3])
def test_kinetic_inequality_random_audit(d, rng):
    n = 10000
    w = 3.0 * rng.standard_normal((n, d))
    u = random_tracefree(rng, d, n)
    rho = rng.uniform(0.2, 5.0, n)
    lhs, rhs, flag = kinetic_inequality_check(w, u, rho)  # raises on violation
    assert np.all(lhs <= rhs + 1e-12)
    assert not flag.any()  # random U almost surely misses the equality set


# ---------------------------------------------------------------------------
# effective energy, gap, deficit on a real ansatz


@pytest.fixture(scope="module")
def wild_state():
    grid = GridSpec(2, 32, 33, 0.4)
    rho0, theta0, u0 = preset_data("wild", grid)
    ans = build_ansatz(grid, rho0, u0)
    bounds = heat.temperature_bounds(ans, theta0)
    chi = choose_flat_energy(ans, bounds[1])
    v = np.broadcast_to(ans.v0, (grid.n_time, grid.dim) + grid.spatial_shape).copy()
    ts = heat.solve_theta(v, ans, theta0, bounds=bounds)
    ebar = effective_energy(ts.theta, ans, chi)
    u = np.zeros((grid.n_time, grid.dim, grid.dim) + grid.spatial_shape)
    return grid, ans, theta0, bounds, chi, v, ts, ebar, u


def test_start_state_is_member(wild_state):
    grid, ans, theta0, bounds, chi, v, ts, ebar, u = wild_state
    gap = constraint_gap(v, u, ans, ebar)
    assert gap.min() > 0.0  # strict even at t = 0 by the margin in chi
    verdict = membership_verdict(gap, grid.times, [grid.t_final / 10])
    assert verdict["member"]


def test_solenoidal_reduction_effective_energy(wild_state):
    # with u0 = 0 the potential vanishes and ebar = chi - (3/2) rho theta
    grid = GridSpec(2, 32, 9, 0.4)
    rho0, theta0, _ = preset_data("dissipative", grid)
    ans = build_ansatz(grid, rho0, np.zeros((2,) + grid.spatial_shape))
    ts = heat.solve_theta(None, ans, theta0)
    ebar = effective_energy(ts.theta, ans, 5.0)
    direct = 5.0 - 1.5 * ans.rho_tilde * ts.theta
    assert np.max(np.abs(ebar - direct)) <= 1e-12


def test_equilibrium_effective_energy_constant():
    grid = GridSpec(2, 32, 9, 0.4)
    one = np.ones(grid.spatial_shape)
    ans = build_ansatz(grid, one, np.zeros((2,) + grid.spatial_shape))
    ts = heat.solve_theta(None, ans, one)
    ebar = effective_energy(ts.theta, ans, 3.0)
    assert np.max(np.abs(ebar - (3.0 - 1.5))) <= 1e-12


def test_effective_energy_responds_linearly_to_small_bumps(wild_state):
    grid, ans, theta0, bounds, chi, v, ts, ebar, u = wild_state
    mesh = grid.meshes()
    zero = sum(0 * m for m in mesh)
    bump_shape = np.stack([np.sin(2 * np.pi * mesh[1]) + zero, zero])
    drifts = []
    for amp in (0.2, 0.1, 0.05):
        ts2 = heat.solve_theta(v + amp * bump_shape, ans, theta0, bounds=bounds)
        ebar2 = effective_energy(ts2.theta, ans, chi)
        drifts.append(np.max(np.abs(ebar2 - ebar)))
    rates = [d / a for d, a in zip(drifts, (0.2, 0.1, 0.05))]
    assert drifts[0] > drifts[1] > drifts[2]
    assert max(rates) <= 3.0 * min(rates)  # O(bump) modulus


def test_gap_zero_at_saturated_state(wild_state):
    grid, ans, theta0, bounds, chi, v, ts, ebar, u = wild_state
    # build the exact-solution state: |V|^2/(2 rho) = ebar with the
    # saturating flux
    times = grid.times
    gp = ans.grad_psi_at(times)
    rho = ans.rho_tilde_at(times)
    direction = np.zeros_like(gp)
    direction[:, 0] = 1.0
    vmag = np.sqrt(2.0 * rho * np.maximum(ebar, 0.0))
    v_sat = vmag[:, None] * direction - gp
    w_last = np.moveaxis(v_sat + gp, 1, -1)
    u_sat = np.moveaxis(equality_flux(w_last, rho), (-2, -1), (1, 2))
    gap = constraint_gap(v_sat, u_sat, ans, ebar)
    assert np.max(np.abs(gap)) <= 1e-8


def test_gap_negative_for_inadmissible_flux(wild_state, rng):
    grid, ans, theta0, bounds, chi, v, ts, ebar, u = wild_state
    bad = u.copy()
    scale = float(np.max(np.abs(ebar))) * 4.0
    bad[:, 0, 0] = -scale
    bad[:, 1, 1] = scale
    gap = constraint_gap(v, bad, ans, ebar)
    assert gap.min() < 0.0
    verdict = membership_verdict(gap, grid.times, [grid.t_final / 10])
    assert not verdict["member"]


def test_energy_deficit_zero_at_saturation(wild_state):
    grid, ans, theta0, bounds, chi, v, ts, ebar, u = wild_state
    times = grid.times
    gp = ans.grad_psi_at(times)
    rho = ans.rho_tilde_at(times)
    direction = np.zeros_like(gp)
    direction[:, 0] = 1.0
    vmag = np.sqrt(2.0 * rho * np.maximum(ebar, 0.0))
    v_sat = vmag[:, None] * direction - gp
    assert abs(energy_deficit(v_sat, ans, ebar, eps=grid.t_final / 10)) <= 1e-10


def test_energy_deficit_zero_velocity_reduction():
    grid = GridSpec(2, 32, 33, 0.4)
    rho0, theta0, _ = preset_data("dissipative", grid)
    ans = build_ansatz(grid, rho0, np.zeros((2,) + grid.spatial_shape))
    ts = heat.solve_theta(None, ans, theta0)
    ebar = effective_energy(ts.theta, ans, 4.0)
    v = np.zeros((grid.n_time, 2) + grid.spatial_shape)
    eps = grid.t_final / 8
    got = energy_deficit(v, ans, ebar, eps)
    sel = grid.times >= eps - 1e-12
    expected = -float(np.trapezoid(torus.integrate(ebar[sel], grid), grid.times[sel]))
    assert got == pytest.approx(expected, rel=1e-12)


def test_energy_deficit_matches_refined_quadrature(wild_state):
    from scipy.integrate import simpson
    grid, ans, theta0, bounds, chi, v, ts, ebar, u = wild_state
    eps = grid.t_final / 8
    got = energy_deficit(v, ans, ebar, eps)
    sel = grid.times >= eps - 1e-12
    vv = v[sel] + ans.grad_psi_at(grid.times[sel])
    rho = ans.rho_tilde_at(grid.times[sel])
    g = torus.integrate(0.5 * (vv * vv).sum(axis=1) / rho - ebar[sel], grid)
    oracle = float(simpson(g, x=grid.times[sel]))
    assert got == pytest.approx(oracle, rel=2e-4)


def test_sup_bound_orders(wild_state):
    grid, ans, theta0, bounds, chi, v, ts, ebar, u = wild_state
    c = velocity_sup_bound(v, ans, ebar)
    assert np.max(np.abs(v)) < c
    zeros = np.zeros_like(v)
    assert velocity_sup_bound(zeros, ans, ebar) == c
    with pytest.raises(BoundViolated):
        velocity_sup_bound(np.full_like(v, 2 * c), ans, ebar)


def test_sup_bound_saturated_state_tight(wild_state):
    grid, ans, theta0, bounds, chi, v, ts, ebar, u = wild_state
    times = grid.times
    gp = ans.grad_psi_at(times)
    rho = ans.rho_tilde_at(times)
    vmag = np.sqrt(2.0 * rho * np.maximum(ebar, 0.0))
    # align the saturated velocity against grad Psi where it is largest so
    # |v| approaches sqrt(2 rho ebar) + |grad Psi|
    direction = np.zeros_like(gp)
    direction[:, 0] = -1.0
    v_sat = vmag[:, None] * direction
    c = velocity_sup_bound(v_sat, ans, ebar)
    assert np.max(np.abs(v_sat)) <= c
    assert np.max(np.abs(v_sat)) >= float(np.max(vmag)) - 1e-8


# ---------------------------------------------------------------------------
# linear system residual


def test_linear_system_residual_constant_state():
    grid = GridSpec(2, 16, 9, 1.0)
    v = np.ones((grid.n_time, 2) + grid.spatial_shape)
    u = np.zeros((grid.n_time, 2, 2) + grid.spatial_shape)
    r1, r2 = linear_system_residual(v, u, grid)
    assert r1 <= 1e-12 and r2 <= 1e-12


def test_linear_system_residual_manufactured_pair():
    # stream-potential construction: v = a(t) (-d2 Lap g, d1 Lap g),
    # U = a'(t) [[2 d12 g, (d22-d11) g], [(d22-d11) g, -2 d12 g]] solves
    # dv/dt + div U = 0, div v = 0 identically; a is a quintic so the
    # centred 4th-order time difference is exact.
    grid = GridSpec(2, 32, 17, 1.0)
    X, Y = grid.meshes()
    zero = 0 * X + 0 * Y
    tt = grid.times / grid.t_final
    a = tt**2 * (1 - tt) ** 2
    ap = (2 * tt * (1 - tt) ** 2 - 2 * tt**2 * (1 - tt)) / grid.t_final
    g_lap = -2 * (2 * np.pi) ** 2  # Lap of sin*sin pattern
    s1 = np.sin(2 * np.pi * X) * np.sin(2 * np.pi * Y) + zero
    d1 = 2 * np.pi * np.cos(2 * np.pi * X) * np.sin(2 * np.pi * Y) + zero
    d2 = 2 * np.pi * np.sin(2 * np.pi * X) * np.cos(2 * np.pi * Y) + zero
    d12 = (2 * np.pi) ** 2 * np.cos(2 * np.pi * X) * np.cos(2 * np.pi * Y) + zero
    d11 = -((2 * np.pi) ** 2) * s1
    d22 = d11.copy()
    v = np.empty((grid.n_time, 2) + grid.spatial_shape)
    u = np.empty((grid.n_time, 2, 2) + grid.spatial_shape)
    for j in range(grid.n_time):
        v[j, 0] = -a[j] * g_lap * d2
        v[j, 1] = a[j] * g_lap * d1
        u[j, 0, 0] = 2 * ap[j] * d12
        u[j, 1, 1] = -2 * ap[j] * d12
        u[j, 0, 1] = u[j, 1, 0] = ap[j] * (d22 - d11)
    r1, r2 = linear_system_residual(v, u, grid)
    assert r1 <= 1e-8
    assert r2 <= 1e-8


def test_linear_system_residual_smoke_random(rng):
    grid = GridSpec(2, 16, 9, 1.0)
    v = rng.standard_normal((grid.n_time, 2) + grid.spatial_shape)
    u = rng.standard_normal((grid.n_time, 2, 2) + grid.spatial_shape)
    u = 0.5 * (u + np.swapaxes(u, 1, 2))
    r1, r2 = linear_system_residual(v, u, grid)
    assert r1 > 1.0 and r2 > 1.0


# ---------------------------------------------------------------------------
# weak-topology metric


def test_weak_metric_axioms(grid2d, rng):
    metric = WeakTopologyMetric(grid2d)
    shape = (3, 2) + grid2d.spatial_shape
    a = rng.standard_normal(shape)
    b = rng.standard_normal(shape)
    c = rng.standard_normal(shape)
    assert metric.distance(a, a) == 0.0
    assert metric.distance(a, b) == pytest.approx(metric.distance(b, a), rel=1e-12)
    assert metric.distance(a, c) <= metric.distance(a, b) + metric.distance(b, c) + 1e-12
    assert metric.distance(a, b) > 0.0
