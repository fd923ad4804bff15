"""Reformulation state: prescribed density, time pulse, and potential.

Given smooth positive initial data (rho0, u0) the momentum density is split as
w = v + grad(Psi) with div v = 0, while the density is *prescribed* as

    rho_tilde(t, x) = rho0(x) - h(t) * div(rho0 u0)(x),

with a C^2 time pulse h satisfying h(0) = 0, h'(0) = 1, h(T) = 0 and a
positivity margin rho_tilde > rho_lower / 2.  The potential solves
Laplace(Psi(t)) = h'(t) * div(rho0 u0) with zero mean, which makes the mass
equation hold pointwise: d/dt rho_tilde = -Laplace(Psi) exactly.

Everything here is separable in time (scalar pulse times a fixed spatial
factor), so time derivatives are taken from the closed form of h, never by
differencing.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import torus
from .torus import GridSpec

__all__ = [
    "TimePulse",
    "Ansatz",
    "PositivityViolated",
    "build_time_pulse",
    "build_ansatz",
    "continuity_residual",
    "preset_data",
    "PRESETS",
]


class PositivityViolated(RuntimeError):
    """The prescribed density dipped below its guaranteed floor."""


@dataclass(frozen=True)
class TimePulse:
    """h(t) = (T / k pi) sin(k pi t / T) for the smallest admissible integer k.

    k is chosen so that sup|h| * sup|div(rho0 u0)| < rho_lower / 2, which
    gives the positivity margin for the prescribed density while keeping
    h(0) = h(T) = 0 and h'(0) = 1.
    """

    k: int
    t_final: float

    def __call__(self, t):
        w = self.k * np.pi / self.t_final
        return np.sin(w * np.asarray(t)) / w

    def deriv(self, t):
        w = self.k * np.pi / self.t_final
        return np.cos(w * np.asarray(t))

    def second(self, t):
        w = self.k * np.pi / self.t_final
        return -w * np.sin(w * np.asarray(t))

    @property
    def sup(self) -> float:
        return self.t_final / (self.k * np.pi)


def build_time_pulse(t_final: float, div_w0_sup: float, rho_lower: float) -> TimePulse:
    """Smallest k with (T / k pi) * sup|div(rho0 u0)| < rho_lower / 2."""
    if rho_lower <= 0:
        raise ValueError("rho_lower must be positive")
    if div_w0_sup == 0.0:
        return TimePulse(k=1, t_final=t_final)
    k = int(np.ceil(2.0 * t_final * div_w0_sup / (np.pi * rho_lower)))
    k = max(k, 1)
    while t_final / (k * np.pi) * div_w0_sup >= rho_lower / 2.0:
        k += 1
    return TimePulse(k=k, t_final=t_final)


def _tshape(t, dim):
    t = np.asarray(t, dtype=float)
    return t.reshape(t.shape + (1,) * dim)


@dataclass(frozen=True)
class Ansatz:
    """Reformulation state; immutable, all time dependence in closed form."""

    grid: GridSpec
    rho0: np.ndarray
    u0: np.ndarray
    rho_lower: float
    pulse: TimePulse
    div_w0: np.ndarray
    psi0: np.ndarray        # zero-mean potential, Laplace(psi0) = div_w0
    grad_psi0: np.ndarray   # (dim, *spatial)
    v0: np.ndarray          # solenoidal part of rho0*u0

    # -- closed-form evaluations (t scalar or 1-d array) --------------------

    def rho_tilde_at(self, t):
        return self.rho0 - _tshape(self.pulse(t), self.grid.dim) * self.div_w0

    def drho_dt_at(self, t):
        return -_tshape(self.pulse.deriv(t), self.grid.dim) * self.div_w0

    def psi_at(self, t):
        return _tshape(self.pulse.deriv(t), self.grid.dim) * self.psi0

    def dpsi_dt_at(self, t):
        return _tshape(self.pulse.second(t), self.grid.dim) * self.psi0

    def grad_psi_at(self, t):
        return _tshape(self.pulse.deriv(t), self.grid.dim + 1) * self.grad_psi0

    # -- sampled views on the grid time axis --------------------------------

    @cached_property
    def rho_tilde(self) -> np.ndarray:
        return self.rho_tilde_at(self.grid.times)

    @cached_property
    def psi(self) -> np.ndarray:
        return self.psi_at(self.grid.times)

    @cached_property
    def grad_psi(self) -> np.ndarray:
        return self.grad_psi_at(self.grid.times)

    @cached_property
    def dpsi_dt(self) -> np.ndarray:
        return self.dpsi_dt_at(self.grid.times)

    @property
    def rho_tilde_min(self) -> float:
        return float(self.rho_tilde.min())

    @property
    def rho_tilde_max(self) -> float:
        # data-only upper bound, valid for every t by the pulse margin
        return float(self.rho0.max() + self.rho_lower / 2.0)

    def validate(self) -> None:
        if not self.rho_tilde_min > self.rho_lower / 2.0:
            raise PositivityViolated(
                f"min rho_tilde = {self.rho_tilde_min:.6g} <= {self.rho_lower / 2.0:.6g}")
        assert self.pulse(0.0) == 0.0
        assert abs(self.pulse.deriv(0.0) - 1.0) <= 1e-10


def build_ansatz(grid: GridSpec, rho0: np.ndarray, u0: np.ndarray,
                 rho_lower: float | None = None) -> Ansatz:
    """Assemble the reformulation state from positive smooth initial data."""
    rho0 = np.asarray(rho0, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    if rho0.min() <= 0:
        raise ValueError("rho0 must be strictly positive")
    if rho_lower is None:
        rho_lower = float(rho0.min())
    div_w0 = torus.divergence(rho0 * u0, grid)
    pulse = build_time_pulse(grid.t_final, torus.max_norm(div_w0), rho_lower)
    m = torus.mean(div_w0, grid)
    psi0 = torus.poisson(div_w0 - m, grid)
    v0, grad_psi0 = torus.helmholtz(rho0 * u0, grid)
    ans = Ansatz(grid=grid, rho0=rho0, u0=u0, rho_lower=rho_lower, pulse=pulse,
                 div_w0=div_w0, psi0=psi0, grad_psi0=grad_psi0, v0=v0)
    ans.validate()
    return ans


def continuity_residual(ans: Ansatz) -> float:
    """max over samples of |d/dt rho_tilde + Laplace(Psi)|.

    The time derivative comes from the analytic pulse, so the value does not
    depend on n_time; it measures only the spectral Poisson closure.
    """
    lap_psi0 = torus.laplacian(ans.psi0, ans.grid)
    hp_max = float(np.max(np.abs(ans.pulse.deriv(ans.grid.times))))
    return hp_max * torus.max_norm(lap_psi0 - ans.div_w0)


# ---------------------------------------------------------------------------
# Built-in analytic data presets (usable from the CLI by name)


def _equilibrium(grid):
    one = np.ones(grid.spatial_shape)
    return one.copy(), one.copy(), np.zeros((grid.dim,) + grid.spatial_shape)


def _analytic(grid):
    """rho0 = 2 + cos(2 pi x1), u0 = (sin(2 pi x1), 0, ...)."""
    mesh = grid.meshes()
    zero = sum(0 * m for m in mesh)
    rho0 = 2.0 + np.cos(2 * np.pi * mesh[0]) + zero
    theta0 = 1.5 + 0.25 * np.sin(2 * np.pi * mesh[1]) + zero
    u0 = np.zeros((grid.dim,) + grid.spatial_shape)
    u0[0] = np.sin(2 * np.pi * mesh[0]) + zero
    return rho0, theta0, u0


def _wild(grid):
    """Mildly varying data with nonzero div(rho0 u0)."""
    mesh = grid.meshes()
    zero = sum(0 * m for m in mesh)
    rho0 = 1.0 + 0.05 * np.cos(2 * np.pi * mesh[0]) + zero
    theta0 = 1.0 + 0.05 * np.sin(2 * np.pi * mesh[1]) + zero
    u0 = np.zeros((grid.dim,) + grid.spatial_shape)
    u0[0] = 0.1 * np.sin(2 * np.pi * mesh[0]) + zero
    u0[1] = 0.05 * np.sin(2 * np.pi * mesh[0]) + zero
    return rho0, theta0, u0


def _dissipative(grid):
    """Mild data with u0 = 0: the solenoidal reduction applies."""
    mesh = grid.meshes()
    zero = sum(0 * m for m in mesh)
    rho0 = 1.0 + 0.05 * np.cos(2 * np.pi * mesh[0]) * np.cos(2 * np.pi * mesh[1]) + zero
    theta0 = 1.0 + 0.05 * np.sin(2 * np.pi * mesh[1]) + zero
    return rho0, theta0, np.zeros((grid.dim,) + grid.spatial_shape)


PRESETS = {
    "equilibrium": _equilibrium,
    "analytic": _analytic,
    "wild": _wild,
    "dissipative": _dissipative,
}


def preset_data(name: str, grid: GridSpec):
    """Return (rho0, theta0, u0) for a named preset."""
    try:
        maker = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choices: {sorted(PRESETS)}") from None
    return maker(grid)
