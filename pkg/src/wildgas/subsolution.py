"""Pointwise algebra of subsolutions.

A subsolution is a pair (v, U) of a solenoidal velocity path and a trace-free
symmetric flux path satisfying the linear balance dv/dt + div U = 0 together
with the strict pointwise constraint

    (d/2) * eigmax[ (v + grad Psi) x (v + grad Psi) / rho_tilde - U ]
        < ebar = chi - (3/2) rho_tilde theta[v] - (3/2) dPsi/dt.

The sharp algebraic fact behind everything: for any w and trace-free
symmetric U one has |w|^2 / 2 <= (d/2) * eigmax[w x w - U], with equality
exactly at U = w x w - (|w|^2/d) I.  (The factor d/2 is 3/2 in three
dimensions; in the planar case it degenerates to 1, which is what makes the
equality case attainable there too.)
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import torus
from .ansatz import Ansatz
from .torus import GridSpec

__all__ = [
    "NotTraceFree",
    "BoundViolated",
    "eigmax_symmetric",
    "lambda_max",
    "kinetic_inequality_check",
    "equality_flux",
    "effective_energy",
    "constraint_gap",
    "inf_gap_over",
    "membership_verdict",
    "energy_deficit",
    "velocity_sup_bound",
    "linear_system_residual",
    "choose_flat_energy",
    "WeakTopologyMetric",
    "Subsolution",
    "export_gap_trace",
]


class NotTraceFree(ValueError):
    """lambda_max was handed a matrix with |trace| above tolerance."""


class BoundViolated(RuntimeError):
    """A verified member exceeded the a-priori sup bound (bookkeeping bug)."""


# ---------------------------------------------------------------------------
# extremal eigenvalue of symmetric matrices, closed form + Newton polish


def eigmax_symmetric(m: np.ndarray) -> np.ndarray:
    """Largest eigenvalue of symmetric (..., d, d) arrays, d in {2, 3}.

    d = 2 uses the exact mean/radius formula.  d = 3 shifts off the trace and
    evaluates the trigonometric solution of the characteristic cubic,
    followed by Newton steps from above (monotone for the largest root).
    Relative accuracy is machine-level for well-separated spectra; when the
    two top eigenvalues coincide to within ~1e-8 the result degrades
    gracefully to ~sqrt(eps) times the matrix scale, the intrinsic limit of
    any characteristic-polynomial route.
    """
    m = np.asarray(m, dtype=float)
    d = m.shape[-1]
    if m.shape[-2] != d or d not in (2, 3):
        raise ValueError(f"expected (..., 2, 2) or (..., 3, 3), got {m.shape}")
    if d == 2:
        a = m[..., 0, 0]
        c = m[..., 1, 1]
        b = m[..., 0, 1]
        return 0.5 * (a + c) + np.hypot(0.5 * (a - c), b)

    mu = (m[..., 0, 0] + m[..., 1, 1] + m[..., 2, 2]) / 3.0
    a = m[..., 0, 0] - mu
    b = m[..., 1, 1] - mu
    x = m[..., 0, 1]
    s = m[..., 0, 2]
    q_ = m[..., 1, 2]
    c = -(a + b)
    # pre-scale by the largest deviator entry so nothing squared can
    # under/overflow, then renormalize so the trace of the square is 2;
    # the cubic below is then scale-free
    scale = np.max(np.abs(np.stack([a, b, c, x, s, q_], axis=-1)), axis=-1)
    sc = np.where(scale > 0.0, scale, 1.0)
    a1, b1, c1 = a / sc, b / sc, c / sc
    x1, s1, q1 = x / sc, s / sc, q_ / sc
    tr2 = a1 * a1 + b1 * b1 + c1 * c1 + 2.0 * (x1 * x1 + s1 * s1 + q1 * q1)
    theta_n = np.sqrt(0.5 * tr2)
    theta_s = sc * theta_n
    safe = np.where(theta_n > 0.0, theta_n, 1.0)
    an, bn, cn = a1 / safe, b1 / safe, c1 / safe
    xn, sn, qn = x1 / safe, s1 / safe, q1 / safe
    det_n = an * (bn * cn - qn * qn) - xn * (xn * cn - qn * sn) \
        + sn * (xn * qn - bn * sn)
    arg = np.clip(-det_n * np.sqrt(27.0) / 2.0, -1.0, 1.0)
    phi = np.arcsin(arg) / 3.0
    lam = (2.0 / np.sqrt(3.0)) * np.sin(phi + 2.0 * np.pi / 3.0)
    # Polish on f(l) = l^3 - l + q.  Seed from above: the quadratic
    # expansion at the rightmost critical point l_c = 1/sqrt(3) always
    # overshoots the largest root and stays exact at double roots, where
    # the arcsin branch loses half its digits.
    q = -det_n
    lam_c = 1.0 / np.sqrt(3.0)
    f_c = lam_c * (lam_c * lam_c - 1.0) + q
    delta0 = np.sqrt(np.maximum(-f_c, 0.0) / (3.0 * lam_c))
    lam = np.maximum(lam, lam_c + delta0)
    # f' degenerates to roundoff exactly at double roots, where the seed is
    # already exact; freeze those points instead of letting f/f' blow up.
    for _ in range(4):
        f = np.maximum(lam * (lam * lam - 1.0) + q, 0.0)
        fp = 3.0 * lam * lam - 1.0
        ok = fp > 1e-7
        lam = lam - np.where(ok, f / np.where(ok, fp, 1.0), 0.0)
    return mu + np.where(theta_s > 0.0, theta_s * lam, 0.0)


def lambda_max(m: np.ndarray, trace_tol: float = 1e-12) -> np.ndarray:
    """Largest eigenvalue of trace-free symmetric matrices (closed form).

    Raises NotTraceFree when |trace| exceeds ``trace_tol`` anywhere.
    """
    m = np.asarray(m, dtype=float)
    tr = np.trace(m, axis1=-2, axis2=-1)
    worst = float(np.max(np.abs(tr))) if tr.size else 0.0
    if worst > trace_tol:
        raise NotTraceFree(f"|trace| = {worst:.3e} > {trace_tol:.1e}")
    return eigmax_symmetric(m)


def _outer(w: np.ndarray) -> np.ndarray:
    return w[..., :, None] * w[..., None, :]


def equality_flux(w: np.ndarray, rho) -> np.ndarray:
    """The unique flux saturating the kinetic bound: (w x w - |w|^2/d I)/rho."""
    w = np.asarray(w, dtype=float)
    d = w.shape[-1]
    rho = np.asarray(rho, dtype=float)[..., None, None]
    return (_outer(w) - ((w * w).sum(-1) / d)[..., None, None] * np.eye(d)) / rho


def kinetic_inequality_check(w: np.ndarray, u: np.ndarray, rho,
                             eq_tol: float = 1e-10):
    """Evaluate both sides of the pointwise kinetic bound.

    Returns (lhs, rhs, equality_flag) with lhs = |w|^2/(2 rho) and
    rhs = (d/2) eigmax[(w x w)/rho - U]; the flag marks points where U equals
    the rank-one traceless flux within ``eq_tol``.  A genuine violation of
    lhs <= rhs + 1e-12 is impossible for symmetric trace-free U and raises.
    """
    w = np.asarray(w, dtype=float)
    u = np.asarray(u, dtype=float)
    rho_a = np.asarray(rho, dtype=float)
    d = w.shape[-1]
    lhs = 0.5 * (w * w).sum(-1) / rho_a
    mat = _outer(w) / rho_a[..., None, None] - u
    rhs = (d / 2.0) * eigmax_symmetric(mat)
    if np.any(lhs > rhs + 1e-12):
        worst = float(np.max(lhs - rhs))
        raise RuntimeError(f"kinetic inequality violated by {worst:.3e}; "
                           "the flux argument is not admissible")
    flag = np.max(np.abs(u - equality_flux(w, rho_a)), axis=(-2, -1)) <= eq_tol
    return lhs, rhs, flag


# ---------------------------------------------------------------------------
# energy function, gap, deficit functionals


def _chi_values(chi, times):
    if callable(chi):
        return np.asarray([float(chi(t)) for t in times])
    arr = np.asarray(chi, dtype=float)
    if arr.ndim == 0:
        return np.full(len(times), float(arr))
    if arr.shape == (len(times),):
        return arr
    raise ValueError(f"cannot interpret chi with shape {arr.shape}")


def effective_energy(theta: np.ndarray, ans: Ansatz, chi,
                     times: np.ndarray | None = None) -> np.ndarray:
    """ebar = chi(t) - (3/2) rho_tilde theta - (3/2) dPsi/dt, per sample."""
    grid = ans.grid
    if times is None:
        times = grid.times
    cvals = _chi_values(chi, times)
    cvals = cvals.reshape((-1,) + (1,) * grid.dim)
    return cvals - 1.5 * ans.rho_tilde_at(times) * theta - 1.5 * ans.dpsi_dt_at(times)


def constraint_gap(v: np.ndarray, u: np.ndarray, ans: Ansatz,
                   ebar: np.ndarray, times: np.ndarray | None = None) -> np.ndarray:
    """Pointwise gap ebar - (d/2) eigmax[(v+grad Psi) x (v+grad Psi)/rho - U]."""
    grid = ans.grid
    d = grid.dim
    if times is None:
        times = grid.times
    vv = v + ans.grad_psi_at(times)
    rho = ans.rho_tilde_at(times)
    # components first -> matrix axes last for the eigen solver
    wlast = np.moveaxis(vv, 1, -1)
    mat = _outer(wlast) / rho[..., None, None]
    mat = mat - np.moveaxis(u, (1, 2), (-2, -1))
    lam = eigmax_symmetric(mat)
    return ebar - (d / 2.0) * lam


def inf_gap_over(gap: np.ndarray, times: np.ndarray, eps: float) -> float:
    """min of the sampled gap over time samples with t >= eps."""
    sel = times >= eps - 1e-12
    if not sel.any():
        raise ValueError(f"no time samples at or beyond eps = {eps}")
    return float(gap[sel].min())


def membership_verdict(gap: np.ndarray, times: np.ndarray,
                       eps_list) -> dict:
    """{eps: inf gap} plus an overall verdict (every inf positive)."""
    infs = {float(e): inf_gap_over(gap, times, float(e)) for e in eps_list}
    return {"inf_gap": infs, "member": all(v > 0.0 for v in infs.values())}


def _time_slice(times: np.ndarray, eps: float) -> int:
    j = int(np.searchsorted(times, eps - 1e-12))
    if j >= len(times) - 1:
        raise ValueError(f"eps = {eps} leaves no integration window")
    return j


def energy_deficit(v: np.ndarray, ans: Ansatz, ebar: np.ndarray,
                   eps: float, times: np.ndarray | None = None) -> float:
    """I_eps = integral over [eps, T] x Omega of (|v+grad Psi|^2/(2 rho) - ebar).

    Negative for every strict subsolution; its magnitude is the energy the
    oscillatory iteration still has to generate.  eps snaps up to the next
    time sample; trapezoidal rule in time, exact mean in space.
    """
    grid = ans.grid
    if times is None:
        times = grid.times
    j = _time_slice(times, eps)
    sel = slice(j, None)
    vv = v[sel] + ans.grad_psi_at(times[sel])
    rho = ans.rho_tilde_at(times[sel])
    integrand = 0.5 * (vv * vv).sum(axis=1) / rho - ebar[sel]
    g = torus.integrate(integrand, grid)
    return float(np.trapezoid(g, times[sel]))


def velocity_sup_bound(v: np.ndarray, ans: Ansatz, ebar: np.ndarray,
                       times: np.ndarray | None = None) -> float:
    """Data-only c with sup_t ||v||_inf < c for every verified member."""
    grid = ans.grid
    if times is None:
        times = grid.times
    rho = ans.rho_tilde_at(times)
    c = float(np.max(np.sqrt(2.0 * rho * np.maximum(ebar, 0.0)))) \
        + float(np.max(np.abs(ans.grad_psi_at(times))))
    vmax = float(np.max(np.abs(v)))
    if not vmax < c:
        raise BoundViolated(f"||v||_inf = {vmax:.6g} >= bound {c:.6g}")
    return c


def linear_system_residual(v: np.ndarray, u: np.ndarray, grid: GridSpec):
    """L2 residuals of (dv/dt + div U, div v) on the sampled grid.

    The time derivative is a centred 4th-order difference evaluated on
    interior samples only (the endpoint slices enter the balance weakly and
    are skipped); space is spectral.
    """
    if grid.n_time < 5:
        raise ValueError("need at least 5 time samples")
    dt = grid.dt
    dv = (v[:-4] - 8 * v[1:-3] + 8 * v[3:-1] - v[4:]) / (12 * dt)
    div_u = np.stack([torus.divergence(u[:, :, a], grid) for a in range(grid.dim)],
                     axis=1)
    r1_f = dv + div_u[2:-2]
    r1 = float(np.sqrt(np.mean(torus.integrate((r1_f ** 2).sum(axis=1), grid))))
    div_v = torus.divergence(v, grid)
    r2 = float(np.sqrt(np.mean(torus.integrate(div_v ** 2, grid))))
    return r1, r2


def choose_flat_energy(ans: Ansatz, theta_hi: float, margin: float = 0.1) -> float:
    """Constant chi making the start state a strict member for any theta.

    chi = (1+margin) * sup over samples of
        (d/2) eigmax[(v0+grad Psi) x (v0+grad Psi) / rho_tilde]
        + (3/2) rho_tilde theta_hi + (3/2) |dPsi/dt|,
    with the v-independent upper temperature bound, so the strict inequality
    survives every re-solve of theta.
    """
    grid = ans.grid
    d = grid.dim
    times = grid.times
    vv = ans.v0[None] + ans.grad_psi_at(times)
    rho = ans.rho_tilde_at(times)
    wlast = np.moveaxis(vv, 1, -1)
    lam = eigmax_symmetric(_outer(wlast) / rho[..., None, None])
    expr = (d / 2.0) * lam + 1.5 * rho * theta_hi + 1.5 * np.abs(ans.dpsi_dt_at(times))
    return float((1.0 + margin) * expr.max())


# ---------------------------------------------------------------------------
# metric for the weak topology (diagnostics only)


def _mode_list(dim: int):
    if dim == 2:
        return [(0, 0), (1, 0), (0, 1), (1, 1), (1, -1), (2, 0), (0, 2)]
    return [(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1),
            (1, 1, 0), (1, 0, 1), (0, 1, 1)]


@dataclass(frozen=True)
class WeakTopologyMetric:
    """Weighted low-mode pairings metrizing weak L2 convergence on paths.

    d(v, w) = max over time samples of sum_j 2^{-j} |<v - w, phi_j>| with a
    fixed countable trigonometric family phi_j (component e_c times cos/sin
    of a low mode, unit L2 norm, enumerated in a documented order).
    """

    grid: GridSpec

    @cached_property
    def family(self) -> np.ndarray:
        grid = self.grid
        mesh = grid.meshes()
        zero = sum(0 * m for m in mesh)
        members = []
        for comp in range(grid.dim):
            for k in _mode_list(grid.dim):
                arg = sum(2 * np.pi * k[a] * mesh[a] for a in range(grid.dim))
                trigs = [np.cos(arg) + zero] if not any(k) else \
                    [np.cos(arg) + zero, np.sin(arg) + zero]
                for tr in trigs:
                    phi = np.zeros((grid.dim,) + grid.spatial_shape)
                    nrm = np.sqrt(float(torus.integrate(tr * tr, grid)))
                    phi[comp] = tr / nrm
                    members.append(phi)
        return np.array(members)

    @cached_property
    def weights(self) -> np.ndarray:
        return 0.5 ** np.arange(1, len(self.family) + 1)

    def pairings(self, slice_v: np.ndarray) -> np.ndarray:
        """<v, phi_j> for one time slice (dim, *spatial)."""
        prod = (self.family * slice_v[None]).sum(axis=1)
        return torus.integrate(prod, self.grid)

    def distance(self, v: np.ndarray, w: np.ndarray) -> float:
        """max over time slices of the weighted pairing sum."""
        diff = v - w
        best = 0.0
        for sl in diff:
            best = max(best, float((self.weights * np.abs(self.pairings(sl))).sum()))
        return best


# ---------------------------------------------------------------------------
# container + CSV export


@dataclass
class Subsolution:
    """Sampled (v, U) pair with its diagnostics."""

    grid: GridSpec
    v: np.ndarray          # (n_time, dim, *spatial)
    u: np.ndarray          # (n_time, dim, dim, *spatial)
    chi: object
    ebar: np.ndarray
    gap: np.ndarray

    def validate(self, eps_list=(1e-3,), solenoidal_tol: float = 1e-10) -> dict:
        r = torus.max_norm(torus.divergence(self.v, self.grid))
        if r > solenoidal_tol:
            raise ValueError(f"subsolution velocity has spectral divergence {r:.3e}")
        d = self.grid.dim
        tr = np.trace(self.u, axis1=1, axis2=2)
        if torus.max_norm(tr) > 1e-12:
            raise ValueError("flux is not trace-free")
        sym = np.moveaxis(self.u, 1, 2)
        if not np.allclose(self.u, sym, atol=1e-12, rtol=0.0):
            raise ValueError("flux is not symmetric")
        return membership_verdict(self.gap, self.grid.times, eps_list)


def export_gap_trace(path, times, gap, deficits: dict) -> None:
    """CSV trace: per-sample t, inf-x gap, and the I_eps values last."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        eps_keys = sorted(deficits)
        w.writerow(["t", "inf_gap"] + [f"I_eps_{e:g}" for e in eps_keys])
        per_t = gap.reshape(gap.shape[0], -1).min(axis=1)
        for j, t in enumerate(times):
            row = [f"{t:.17g}", f"{per_t[j]:.17g}"]
            row += [f"{deficits[e]:.17g}" for e in eps_keys]
            w.writerow(row)
