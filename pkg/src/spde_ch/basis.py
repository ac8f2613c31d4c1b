"""Laplacian eigenbases on the box [0, pi]^d and grid <-> coefficient transforms.

Two boundary conditions are supported:

* Neumann:   e_0(x) = 1/sqrt(pi),  e_k(x) = sqrt(2/pi) cos(k x), k >= 1
* Dirichlet: e_k(x) = sqrt(2/pi) sin(k x), k >= 1

In d dimensions the eigenfunctions are tensor products over the axes and
-Laplace e_k = lambda_k e_k with lambda_k = sum_i k_i^2.  The biharmonic
operator has eigenvalue lambda_k^2 on the same basis.

Each axis keeps M modes.  The collocation grid is chosen so that the
quadrature rule underlying the discrete transform integrates products of any
two retained basis functions exactly:

* Neumann: midpoints x_j = (j + 1/2) pi / M with the type-II DCT,
* Dirichlet: interior points x_j = (j + 1) pi / (M + 1) with the type-I DST
  (trapezoid weights; boundary values vanish).

With those pairings the forward transform is plain quadrature against the
basis, round trips are exact to rounding, and Parseval holds on the grid.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import fft as sfft

NEUMANN = "neumann"
DIRICHLET = "dirichlet"

#: hard cap on the total number of retained modes (memory guard)
MAX_TOTAL_MODES = 2**25


def _check_bc(bc: str) -> str:
    if bc not in (NEUMANN, DIRICHLET):
        raise ValueError(f"unknown boundary condition {bc!r}; "
                         f"expected {NEUMANN!r} or {DIRICHLET!r}")
    return bc


class Basis:
    """Truncated eigenbasis with M modes per axis in dimension d.

    Parameters
    ----------
    bc : str
        ``"neumann"`` or ``"dirichlet"``.
    dim : int
        Spatial dimension, 1..5.
    modes_per_axis : int
        Number of retained modes M per axis.  Neumann keeps k = 0..M-1,
        Dirichlet keeps k = 1..M, so coefficient tensors have shape (M,)*d
        either way.
    """

    def __init__(self, bc: str, dim: int, modes_per_axis: int):
        self.bc = _check_bc(bc)
        if not 1 <= int(dim) <= 5:
            raise ValueError(f"dim must be in 1..5, got {dim}")
        if modes_per_axis < 1:
            raise ValueError(f"modes_per_axis must be >= 1, got {modes_per_axis}")
        self.dim = int(dim)
        self.modes_per_axis = int(modes_per_axis)
        if self.modes_per_axis ** self.dim > MAX_TOTAL_MODES:
            raise ValueError(
                f"{modes_per_axis}^{dim} modes exceeds the cap {MAX_TOTAL_MODES}")

        M = self.modes_per_axis
        if self.bc == NEUMANN:
            self.axis_modes = np.arange(M)
            self.spacing = math.pi / M
            self.axis_points = (np.arange(M) + 0.5) * self.spacing
        else:
            self.axis_modes = np.arange(1, M + 1)
            self.spacing = math.pi / (M + 1)
            self.axis_points = np.arange(1, M + 1) * self.spacing

        # lambda_k = sum_i k_i^2 as a dense (M,)*d tensor
        sq = self.axis_modes.astype(float) ** 2
        lam = sq
        for _ in range(self.dim - 1):
            lam = lam[..., None] + sq
        self.laplace_eigenvalues = np.ascontiguousarray(lam)
        self.biharmonic_eigenvalues = self.laplace_eigenvalues ** 2

    # ------------------------------------------------------------------
    # basic queries

    @property
    def shape(self) -> tuple:
        return (self.modes_per_axis,) * self.dim

    @property
    def n_modes(self) -> int:
        return self.modes_per_axis ** self.dim

    def eigenvalue(self, k) -> float:
        """lambda_k = sum_i k_i^2 for a multi-index k."""
        k = np.atleast_1d(np.asarray(k, dtype=float))
        if k.shape[-1] != self.dim:
            raise ValueError(f"multi-index has length {k.shape[-1]}, expected {self.dim}")
        self._check_modes(k)
        return float(np.sum(k * k, axis=-1)) if k.ndim == 1 else np.sum(k * k, axis=-1)

    def _check_modes(self, k) -> None:
        lo = self.axis_modes[0]
        hi = self.axis_modes[-1]
        if np.any(k < lo) or np.any(k > hi):
            raise ValueError(f"mode index out of range [{lo}, {hi}] for bc={self.bc!r}")

    def axis_function(self, k: int, x, deriv: int = 0):
        """Evaluate the 1-d factor e_k (or its deriv-th derivative) at x."""
        x = np.asarray(x, dtype=float)
        k = int(k)
        self._check_modes(np.array([k]))
        if self.bc == NEUMANN:
            if k == 0:
                if deriv == 0:
                    return np.full_like(x, 1.0 / math.sqrt(math.pi))
                return np.zeros_like(x)
            # d^m/dx^m cos(kx) = k^m cos(kx + m pi/2)
            return math.sqrt(2.0 / math.pi) * k**deriv * np.cos(k * x + deriv * math.pi / 2)
        return math.sqrt(2.0 / math.pi) * k**deriv * np.sin(k * x + deriv * math.pi / 2)

    def eigenfunction(self, k, points, derivs=None):
        """Evaluate the tensor eigenfunction e_k at points.

        Parameters
        ----------
        k : sequence of int, length d
        points : array, shape (..., d) (or (...,) when d == 1)
        derivs : optional per-axis derivative orders (for probe evaluations).
        """
        k = np.atleast_1d(np.asarray(k))
        if k.size != self.dim:
            raise ValueError(f"multi-index must have {self.dim} entries")
        pts = np.asarray(points, dtype=float)
        if self.dim == 1 and (pts.ndim == 0 or pts.shape[-1] != 1):
            pts = pts[..., None]
        if pts.shape[-1] != self.dim:
            raise ValueError(f"points must have trailing dim {self.dim}")
        if derivs is None:
            derivs = (0,) * self.dim
        out = np.ones(pts.shape[:-1], dtype=float)
        for i in range(self.dim):
            out = out * self.axis_function(int(k[i]), pts[..., i], deriv=int(derivs[i]))
        return out

    def grid(self):
        """Tensor mesh of collocation points, shape (M,)*d + (d,)."""
        axes = np.meshgrid(*([self.axis_points] * self.dim), indexing="ij")
        return np.stack(axes, axis=-1)

    # ------------------------------------------------------------------
    # transforms

    def _fine_spacing(self, factor: int) -> float:
        M = factor * self.modes_per_axis
        return math.pi / M if self.bc == NEUMANN else math.pi / (M + 1)

    def transform(self, values: np.ndarray) -> np.ndarray:
        """Grid values -> coefficients (quadrature against the basis).

        Accepts stacked inputs: transforms act on the trailing d axes.
        """
        values = np.asarray(values, dtype=float)
        self._check_grid_shape(values)
        axes = tuple(range(values.ndim - self.dim, values.ndim))
        if self.bc == NEUMANN:
            out = sfft.dctn(values, type=2, norm="ortho", axes=axes)
        else:
            out = sfft.dstn(values, type=1, norm="ortho", axes=axes)
        return out * self.spacing ** (self.dim / 2.0)

    def inverse_transform(self, coeffs: np.ndarray) -> np.ndarray:
        """Coefficients -> values on the collocation grid."""
        coeffs = np.asarray(coeffs, dtype=float)
        self._check_grid_shape(coeffs)
        axes = tuple(range(coeffs.ndim - self.dim, coeffs.ndim))
        scaled = coeffs / self.spacing ** (self.dim / 2.0)
        if self.bc == NEUMANN:
            return sfft.idctn(scaled, type=2, norm="ortho", axes=axes)
        return sfft.idstn(scaled, type=1, norm="ortho", axes=axes)

    def _check_grid_shape(self, arr: np.ndarray) -> None:
        if arr.ndim < self.dim or arr.shape[-self.dim:] != self.shape:
            raise ValueError(
                f"array trailing shape {arr.shape} does not match basis shape {self.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite entries in field")

    # ------------------------------------------------------------------
    # spectral multipliers

    def laplacian(self, coeffs: np.ndarray) -> np.ndarray:
        """Apply the Laplacian: multiply mode k by -lambda_k."""
        return np.asarray(coeffs) * (-self.laplace_eigenvalues)

    def biharmonic(self, coeffs: np.ndarray) -> np.ndarray:
        """Apply Laplace^2: multiply mode k by +lambda_k^2."""
        return np.asarray(coeffs) * self.biharmonic_eigenvalues

    def derivative(self, coeffs: np.ndarray, orders) -> np.ndarray:
        """Apply an even-order mixed derivative D^a, a = (a_1..a_d).

        Mode k picks up the factor prod_i (-k_i^2)^(a_i/2); odd orders leave
        the span of the basis and are rejected.
        """
        orders = tuple(int(a) for a in np.atleast_1d(orders))
        if len(orders) != self.dim:
            raise ValueError(f"need {self.dim} derivative orders, got {len(orders)}")
        if any(a < 0 or a % 2 for a in orders):
            raise ValueError(f"derivative orders must be even and >= 0, got {orders}")
        out = np.array(coeffs, dtype=float, copy=True)
        for i, a in enumerate(orders):
            if a == 0:
                continue
            fac = (-(self.axis_modes.astype(float) ** 2)) ** (a // 2)
            shape = [1] * self.dim
            shape[i] = self.modes_per_axis
            out = out * fac.reshape(shape)
        return out

    # ------------------------------------------------------------------
    # dealiased pointwise nonlinearities

    def values_on_refined_grid(self, coeffs: np.ndarray, factor: int = 2) -> np.ndarray:
        """Synthesize the field on a factor-times finer grid (zero padding)."""
        coeffs = np.asarray(coeffs, dtype=float)
        self._check_grid_shape(coeffs)
        M = self.modes_per_axis
        lead = coeffs.shape[:-self.dim]
        padded = np.zeros(lead + (factor * M,) * self.dim, dtype=float)
        padded[(...,) + (slice(0, M),) * self.dim] = coeffs
        axes = tuple(range(padded.ndim - self.dim, padded.ndim))
        h = self._fine_spacing(factor)
        scaled = padded / h ** (self.dim / 2.0)
        if self.bc == NEUMANN:
            return sfft.idctn(scaled, type=2, norm="ortho", axes=axes)
        return sfft.idstn(scaled, type=1, norm="ortho", axes=axes)

    def coeffs_from_refined_grid(self, values: np.ndarray, factor: int = 2) -> np.ndarray:
        """Project fine-grid values back onto the retained modes."""
        values = np.asarray(values, dtype=float)
        M = self.modes_per_axis
        if values.shape[-self.dim:] != (factor * M,) * self.dim:
            raise ValueError("refined grid shape mismatch")
        axes = tuple(range(values.ndim - self.dim, values.ndim))
        h = self._fine_spacing(factor)
        if self.bc == NEUMANN:
            full = sfft.dctn(values, type=2, norm="ortho", axes=axes)
        else:
            full = sfft.dstn(values, type=1, norm="ortho", axes=axes)
        full = full * h ** (self.dim / 2.0)
        return np.ascontiguousarray(full[(...,) + (slice(0, M),) * self.dim])

    def dealiased_apply(self, fn, coeffs: np.ndarray, factor: int = 2) -> np.ndarray:
        """Coefficients of fn(u) for a pointwise fn, evaluated alias-free.

        factor=2 integrates cubic nonlinearities of retained modes exactly.
        """
        vals = self.values_on_refined_grid(coeffs, factor=factor)
        return self.coeffs_from_refined_grid(fn(vals), factor=factor)

    # ------------------------------------------------------------------
    # grid functionals

    def quad_weight(self) -> float:
        return self.spacing ** self.dim

    def integrate(self, values: np.ndarray) -> float:
        return float(np.sum(values) * self.quad_weight())

    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        """L2 inner product of two grid fields (collocation quadrature)."""
        return float(np.sum(np.asarray(a) * np.asarray(b)) * self.quad_weight())

    def lq_norm(self, values: np.ndarray, q: float) -> float:
        """||.||_{L^q(Q)} of a grid field; q = inf gives the sup norm."""
        v = np.abs(np.asarray(values, dtype=float))
        if math.isinf(q):
            return float(v.max())
        if q < 1:
            raise ValueError(f"q must be >= 1 or inf, got {q}")
        return float((np.sum(v**q) * self.quad_weight()) ** (1.0 / q))

    def lq_norm_coeffs(self, coeffs: np.ndarray, q: float, factor: int = 2) -> float:
        """||u||_q evaluated from coefficients on a refined grid."""
        return self.lq_norm(self.values_on_refined_grid(coeffs, factor=factor), q)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Basis(bc={self.bc!r}, dim={self.dim}, modes_per_axis={self.modes_per_axis})"


# ----------------------------------------------------------------------
# thin field wrappers used at API boundaries

class SpectralField:
    """A field identified by its coefficient tensor on a Basis."""

    def __init__(self, basis: Basis, coeffs: np.ndarray):
        coeffs = np.asarray(coeffs, dtype=float)
        basis._check_grid_shape(coeffs)
        self.basis = basis
        self.coeffs = coeffs

    def to_grid(self) -> "GridField":
        return GridField(self.basis, self.basis.inverse_transform(self.coeffs))

    def l2_norm(self) -> float:
        return float(np.sqrt(np.sum(self.coeffs**2)))


class GridField:
    """A field sampled on the collocation grid of a Basis."""

    def __init__(self, basis: Basis, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        basis._check_grid_shape(values)
        self.basis = basis
        self.values = values

    def to_spectral(self) -> SpectralField:
        return SpectralField(self.basis, self.basis.transform(self.values))


def apply_operator(field: SpectralField, op: str, orders=None) -> SpectralField:
    """Apply a constant-coefficient operator to a spectral field.

    op is one of ``"laplacian"``, ``"biharmonic"``, ``"derivative"`` (the
    latter takes even per-axis orders).
    """
    b = field.basis
    if op == "laplacian":
        return SpectralField(b, b.laplacian(field.coeffs))
    if op == "biharmonic":
        return SpectralField(b, b.biharmonic(field.coeffs))
    if op == "derivative":
        if orders is None:
            raise ValueError("derivative requires per-axis orders")
        return SpectralField(b, b.derivative(field.coeffs, orders))
    raise ValueError(f"unknown operator {op!r}")
