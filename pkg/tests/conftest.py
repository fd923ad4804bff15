import numpy as np
import pytest

from wildgas.torus import GridSpec


def random_trig(grid: GridSpec, rng, kmax=3, amp=1.0, shape=()):
    """Random real band-limited field: sum of modes with |k_a| <= kmax."""
    out = np.zeros(shape + grid.spatial_shape)
    mesh = grid.meshes()
    it = np.ndindex(*(2 * kmax + 1,) * grid.dim)
    for idx in it:
        k = np.array(idx) - kmax
        if not k.any():
            continue
        coef = amp * rng.standard_normal(shape + (1,) * grid.dim)
        phase = rng.uniform(0, 2 * np.pi, size=shape + (1,) * grid.dim)
        arg = sum(2 * np.pi * k[a] * mesh[a] for a in range(grid.dim))
        out = out + coef * np.cos(arg + phase)
    return out / (2 * kmax + 1) ** grid.dim * 4


def fd4_derivative(values, axis, grid):
    """4th-order centred finite difference along a spatial axis (oracle)."""
    h = grid.dx
    ax = values.ndim - grid.dim + axis
    f1 = np.roll(values, -1, axis=ax)
    f2 = np.roll(values, -2, axis=ax)
    b1 = np.roll(values, 1, axis=ax)
    b2 = np.roll(values, 2, axis=ax)
    return (-f2 + 8 * f1 - 8 * b1 + b2) / (12 * h)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def grid2d():
    return GridSpec(dim=2, n_space=32, n_time=9, t_final=1.0)


@pytest.fixture
def grid3d():
    return GridSpec(dim=3, n_space=16, n_time=5, t_final=0.5)
