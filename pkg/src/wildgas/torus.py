"""Periodic-grid fields and spectral calculus on the flat torus.

Everything in the package lives on a uniform collocation grid over the unit
torus [0,1)^d, d in {2,3}, sampled with ``n_space`` points per axis, together
with a uniform time grid on [0, t_final].  Derivatives, Poisson inversion and
the Helmholtz projection are computed in frequency space via the real FFT, so
they are exact for band-limited data.

Array convention: the *last* ``dim`` axes of any sample array are the spatial
axes.  Leading axes (time index, vector/tensor components) broadcast through
every operator, e.g. a time-indexed vector field is ``(n_time, dim, n, ..., n)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "GridSpec",
    "ScalarField",
    "VectorField",
    "TensorField",
    "GridMismatch",
    "NonZeroMean",
    "spectral_derivative",
    "poisson_solve",
    "helmholtz_decompose",
    "deriv",
    "gradient",
    "divergence",
    "laplacian",
    "poisson",
    "helmholtz",
    "dealias",
    "integrate",
    "mean",
    "l2_norm",
    "max_norm",
    "write_snapshot",
    "read_snapshot",
]

# Default tolerances for the declared-field invariants.
SOLENOIDAL_TOL = 1e-10
TRACE_TOL = 1e-12
MEAN_TOL = 1e-10


class GridMismatch(ValueError):
    """Fields defined on different grids were combined."""


class NonZeroMean(ValueError):
    """Poisson inversion was asked for a right-hand side with nonzero mean."""


@dataclass(frozen=True)
class GridSpec:
    """Uniform space-time sampling of [0, t_final] x T^d.

    Parameters
    ----------
    dim : int
        Spatial dimension, 2 or 3.  (The machinery breaks down in 1D and the
        package refuses to build such grids.)
    n_space : int
        Samples per spatial axis; a power of two, at least 8.
    n_time : int
        Time samples on [0, t_final], at least 2.
    t_final : float
        Time horizon T > 0.
    """

    dim: int
    n_space: int
    n_time: int
    t_final: float

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        n = self.n_space
        if n < 8 or (n & (n - 1)) != 0:
            raise ValueError(f"n_space must be a power of two >= 8, got {n}")
        if self.n_time < 2:
            raise ValueError(f"n_time must be >= 2, got {self.n_time}")
        if not self.t_final > 0:
            raise ValueError(f"t_final must be positive, got {self.t_final}")

    # -- geometry ---------------------------------------------------------

    @property
    def dx(self) -> float:
        return 1.0 / self.n_space

    @property
    def spatial_shape(self) -> tuple:
        return (self.n_space,) * self.dim

    @cached_property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.t_final, self.n_time)

    @property
    def dt(self) -> float:
        return self.t_final / (self.n_time - 1)

    @cached_property
    def axes(self) -> list:
        """Per-axis sample coordinates in [0,1)."""
        x = np.arange(self.n_space) / self.n_space
        return [x] * self.dim

    def meshes(self) -> list:
        """Broadcastable coordinate arrays, one per spatial axis."""
        out = []
        for a in range(self.dim):
            shape = [1] * self.dim
            shape[a] = self.n_space
            out.append(self.axes[a].reshape(shape))
        return out

    # -- spectral workspace -------------------------------------------------

    @cached_property
    def _wavenumbers(self) -> list:
        """2*pi*k arrays shaped for rfftn output, one per spatial axis."""
        n = self.n_space
        ks = []
        for a in range(self.dim):
            if a == self.dim - 1:
                k = np.fft.rfftfreq(n, d=1.0 / n)
            else:
                k = np.fft.fftfreq(n, d=1.0 / n)
            shape = [1] * self.dim
            shape[a] = k.size
            ks.append((2.0 * np.pi * k).reshape(shape))
        return ks

    @cached_property
    def _ik(self) -> list:
        """i*k multipliers for first derivatives (Nyquist mode zeroed)."""
        nyq = np.pi * self.n_space  # 2*pi * (n/2)
        out = []
        for k in self._wavenumbers:
            kk = k.copy()
            kk[np.isclose(np.abs(kk), nyq)] = 0.0
            out.append(1j * kk)
        return out

    @cached_property
    def _k2(self) -> np.ndarray:
        k2 = np.zeros(self._rfft_shape)
        for k in self._wavenumbers:
            k2 = k2 + k * k
        return k2

    @cached_property
    def _inv_k2(self) -> np.ndarray:
        k2 = np.array(np.broadcast_to(self._k2, self._rfft_shape), dtype=float).copy()
        zero = k2 == 0.0
        k2[zero] = 1.0
        inv = 1.0 / k2
        inv[zero] = 0.0
        return inv

    @cached_property
    def _rfft_shape(self) -> tuple:
        n = self.n_space
        return (n,) * (self.dim - 1) + (n // 2 + 1,)

    @cached_property
    def _dealias_mask(self) -> np.ndarray:
        cut = (2.0 / 3.0) * np.pi * self.n_space  # 2/3 of the Nyquist wavenumber
        mask = np.ones(self._rfft_shape, dtype=bool)
        for k in self._wavenumbers:
            mask &= np.broadcast_to(np.abs(k) <= cut, self._rfft_shape)
        return mask

    @property
    def _space_axes(self) -> tuple:
        return tuple(range(-self.dim, 0))


# ---------------------------------------------------------------------------
# Field containers


def _check_spatial(grid: GridSpec, values: np.ndarray, lead: tuple):
    want = lead + grid.spatial_shape
    if values.shape[-len(want):] != want and values.shape != want:
        raise GridMismatch(f"expected trailing shape {want}, got {values.shape}")


@dataclass(frozen=True)
class ScalarField:
    """Scalar samples on one time slice (trailing axes are spatial)."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape[-self.grid.dim:] != self.grid.spatial_shape:
            raise GridMismatch(
                f"scalar samples {self.values.shape} do not end in {self.grid.spatial_shape}")


@dataclass(frozen=True)
class VectorField:
    """Vector samples; component axis precedes the spatial axes."""

    grid: GridSpec
    values: np.ndarray
    solenoidal: bool = False

    def __post_init__(self):
        d = self.grid.dim
        if self.values.shape[-d - 1:] != (d,) + self.grid.spatial_shape:
            raise GridMismatch(
                f"vector samples {self.values.shape} do not end in {(d,) + self.grid.spatial_shape}")
        if self.solenoidal:
            r = max_norm(divergence(self.values, self.grid))
            if r > SOLENOIDAL_TOL:
                raise ValueError(f"declared-solenoidal field has spectral divergence {r:.3e}")


@dataclass(frozen=True)
class TensorField:
    """Symmetric tensor samples; two component axes precede the spatial axes."""

    grid: GridSpec
    values: np.ndarray
    trace_free: bool = False

    def __post_init__(self):
        d = self.grid.dim
        if self.values.shape[-d - 2:] != (d, d) + self.grid.spatial_shape:
            raise GridMismatch(
                f"tensor samples {self.values.shape} do not end in {(d, d) + self.grid.spatial_shape}")
        sym = np.moveaxis(self.values, -d - 2, -d - 1)
        if not np.allclose(self.values, sym, atol=1e-12, rtol=0.0):
            raise ValueError("tensor samples are not symmetric")
        if self.trace_free:
            tr = np.trace(self.values, axis1=-d - 2, axis2=-d - 1)
            worst = np.max(np.abs(tr))
            if worst > TRACE_TOL:
                raise ValueError(f"declared trace-free tensor has |trace| = {worst:.3e}")


# ---------------------------------------------------------------------------
# Array-level spectral operators (leading axes broadcast)


def deriv(values: np.ndarray, axis: int, grid: GridSpec) -> np.ndarray:
    """Spectral d/dx_axis along spatial axis ``axis`` in 0..dim-1."""
    if not 0 <= axis < grid.dim:
        raise ValueError(f"axis {axis} out of range for dim {grid.dim}")
    hat = np.fft.rfftn(values, axes=grid._space_axes)
    hat *= grid._ik[axis]
    return np.fft.irfftn(hat, s=grid.spatial_shape, axes=grid._space_axes)


def gradient(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Gradient; the new component axis is inserted before the spatial axes."""
    hat = np.fft.rfftn(values, axes=grid._space_axes)
    comps = [
        np.fft.irfftn(hat * grid._ik[a], s=grid.spatial_shape, axes=grid._space_axes)
        for a in range(grid.dim)
    ]
    return np.stack(comps, axis=-grid.dim - 1)


def divergence(vec: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Divergence of a vector array whose component axis precedes space."""
    d = grid.dim
    comp = -d - 1
    out = None
    for a in range(d):
        term = deriv(np.take(vec, a, axis=comp), a, grid)
        out = term if out is None else out + term
    return out


def laplacian(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    hat = np.fft.rfftn(values, axes=grid._space_axes)
    hat *= -grid._k2
    return np.fft.irfftn(hat, s=grid.spatial_shape, axes=grid._space_axes)


def poisson(values: np.ndarray, grid: GridSpec, tol: float = MEAN_TOL) -> np.ndarray:
    """Solve Laplace(psi) = values with zero-mean psi.

    The constant mode of the right-hand side must vanish (|mean| <= tol);
    the constant mode of the solution is explicitly zeroed.
    """
    m = np.max(np.abs(mean(values, grid)))
    if m > tol:
        raise NonZeroMean(f"Poisson right-hand side has mean {m:.3e} > {tol:.1e}")
    hat = np.fft.rfftn(values, axes=grid._space_axes)
    hat *= -grid._inv_k2  # zero mode multiplier is exactly 0
    return np.fft.irfftn(hat, s=grid.spatial_shape, axes=grid._space_axes)


def helmholtz(vec: np.ndarray, grid: GridSpec) -> tuple:
    """Split w = v + grad(psi) with div v = 0 and zero-mean psi.

    Implemented as the Leray projector mode by mode, with the same
    (Nyquist-zeroed) derivative multipliers the divergence checker uses, so
    ``divergence(v)`` vanishes to machine precision for arbitrary samples.
    The spatial mean of ``vec`` stays in the divergence-free part.
    Returns (v, grad_psi).
    """
    d = grid.dim
    comp = -d - 1
    hats = [np.fft.rfftn(np.take(vec, a, axis=comp), axes=grid._space_axes)
            for a in range(d)]
    ik = grid._ik
    k2z = np.zeros(grid._rfft_shape)
    for m in ik:
        k2z = k2z + (m.imag) ** 2
    inv = np.where(k2z > 0.0, 1.0 / np.where(k2z > 0.0, k2z, 1.0), 0.0)
    div_hat = sum(ik[a] * hats[a] for a in range(d))
    psi_hat = -inv * div_hat  # Laplace(psi) = div w, zero mean
    gp = []
    for a in range(d):
        gp.append(np.fft.irfftn(ik[a] * psi_hat, s=grid.spatial_shape,
                                axes=grid._space_axes))
    gp = np.stack(gp, axis=comp)
    return vec - gp, gp


def dealias(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    """2/3-rule truncation, for use on pointwise products."""
    hat = np.fft.rfftn(values, axes=grid._space_axes)
    hat *= grid._dealias_mask
    return np.fft.irfftn(hat, s=grid.spatial_shape, axes=grid._space_axes)


def integrate(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Integral over the torus (|Omega| = 1): exact for trig polynomials."""
    return values.mean(axis=grid._space_axes)


def mean(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    return values.mean(axis=grid._space_axes)


def l2_norm(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    return np.sqrt(integrate(values * values, grid))


def max_norm(values: np.ndarray) -> float:
    return float(np.max(np.abs(values)))


# ---------------------------------------------------------------------------
# Field-level wrappers (the public contract surface)


def spectral_derivative(f: ScalarField, axis: int) -> ScalarField:
    """d f / d x_axis in frequency space; exact for band-limited samples."""
    return ScalarField(f.grid, deriv(f.values, axis, f.grid))


def poisson_solve(f: ScalarField, tol: float = MEAN_TOL) -> ScalarField:
    """Zero-mean psi with Laplace(psi) = f; raises NonZeroMean otherwise."""
    return ScalarField(f.grid, poisson(f.values, f.grid, tol=tol))


def helmholtz_decompose(w: VectorField) -> tuple:
    """Return (v, grad_psi) with w = v + grad_psi and div v = 0."""
    v, gp = helmholtz(w.values, w.grid)
    return VectorField(w.grid, v, solenoidal=True), VectorField(w.grid, gp)


# ---------------------------------------------------------------------------
# Snapshot files
#
# Binary layout: magic b"WGSNAP01", int64 dim, int64 n_space, int64 n_time,
# float64 t_final, int64 ndim_of_payload, int64 shape..., then row-major
# float64 samples.  The shape suffix lets one file hold a single slice, a
# time-indexed scalar, or component-carrying fields without guesswork.

_MAGIC = b"WGSNAP01"


def write_snapshot(path, grid: GridSpec, values: np.ndarray) -> None:
    arr = np.ascontiguousarray(values, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<qqqd", grid.dim, grid.n_space, grid.n_time, grid.t_final))
        fh.write(struct.pack("<q", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
        fh.write(arr.tobytes())


def read_snapshot(path) -> tuple:
    """Return (grid, values) stored by :func:`write_snapshot`."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise ValueError(f"{path} is not a field snapshot")
        dim, n_space, n_time, t_final = struct.unpack("<qqqd", fh.read(32))
        (nd,) = struct.unpack("<q", fh.read(8))
        shape = struct.unpack(f"<{nd}q", fh.read(8 * nd))
        data = np.frombuffer(fh.read(), dtype=np.float64).reshape(shape)
    return GridSpec(dim, n_space, n_time, t_final), data.copy()
