"""Dirichlet-Laplacian eigensystem on (0, L) and fields expanded in it.

A field is stored by its coefficients in the orthonormal basis
``e_n(x) = sqrt(2/L) sin(n pi x / L)``, ``n = 1..N``.  Coefficient arrays may
carry leading batch axes; the mode axis is always last.

Grid values live on the uniform interior grid ``x_j = j L / (M + 1)``,
``j = 1..M``.  With trapezoidal weight ``h = L / (M + 1)`` the sampled basis
is exactly orthonormal for ``N <= M``, so grid quadrature of products of
fields in the span is exact up to round-off.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigError, UsageError


@dataclass(frozen=True)
class GalerkinSpace:
    """Truncated eigensystem of the Dirichlet Laplacian on (0, L).

    ``max_degree`` is the highest polynomial degree that will be evaluated
    pointwise on the grid; it sets the anti-aliasing floor
    ``M >= 2 (max_degree + 1) N``.
    """

    L: float
    N: int
    M: int | None = None
    gamma: float = 0.3
    max_degree: int = 1

    def __post_init__(self):
        if not self.L > 0:
            raise ConfigError(f"domain length must be positive, got {self.L}")
        if self.N < 1:
            raise ConfigError(f"mode truncation N must be >= 1, got {self.N}")
        if not 0.25 < self.gamma < 0.5:
            raise ConfigError(f"gamma must lie in (1/4, 1/2), got {self.gamma}")
        floor = self.min_grid(self.N, self.max_degree)
        if self.M is None:
            object.__setattr__(self, "M", max(4 * self.N, floor))
        if self.M < 1:
            raise ConfigError(f"grid size M must be >= 1, got {self.M}")
        if self.M < floor:
            raise ConfigError(
                f"grid size M={self.M} is below the anti-aliasing floor "
                f"2(d+1)N={floor} for degree d={self.max_degree}"
            )

    @staticmethod
    def min_grid(N: int, degree: int) -> int:
        return 2 * (max(degree, 1) + 1) * N

    def supports_degree(self, degree: int) -> bool:
        return self.M >= self.min_grid(self.N, degree)

    @cached_property
    def modes(self) -> np.ndarray:
        return np.arange(1, self.N + 1)

    @cached_property
    def lambdas(self) -> np.ndarray:
        """Eigenvalues -(n pi / L)^2, strictly decreasing in n."""
        return -((self.modes * np.pi / self.L) ** 2)

    @property
    def omega(self) -> float:
        """Exponential decay rate of the semigroup, ``-lambda_1``."""
        return (np.pi / self.L) ** 2

    @property
    def c_omega(self) -> float:
        """Sharp constant with ``c_omega |lambda_n|^(2 gamma) <= |lambda_n|``."""
        return self.omega ** (1.0 - 2.0 * self.gamma)

    @property
    def h(self) -> float:
        return self.L / (self.M + 1)

    @cached_property
    def grid(self) -> np.ndarray:
        return np.arange(1, self.M + 1) * self.h

    @cached_property
    def basis(self) -> np.ndarray:
        """Sampled eigenfunctions, shape (N, M)."""
        return np.sqrt(2.0 / self.L) * np.sin(
            np.outer(self.modes, np.arange(1, self.M + 1)) * np.pi / (self.M + 1)
        )

    @cached_property
    def projector(self) -> np.ndarray:
        """Weighted transpose of ``basis``: grid values -> coefficients."""
        return self.h * self.basis.T

    def weights(self, g: float) -> np.ndarray:
        return np.abs(self.lambdas) ** (2.0 * g)

    # raw-array versions used by the time steppers
    def coeffs_to_grid(self, coeffs: np.ndarray) -> np.ndarray:
        return np.asarray(coeffs) @ self.basis

    def grid_to_coeffs(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values) @ self.projector

    def norm_sq(self, coeffs: np.ndarray, g: float = 0.0) -> np.ndarray:
        coeffs = np.asarray(coeffs)
        if g == 0:
            return np.einsum("...n,...n->...", coeffs, coeffs)
        return (coeffs**2) @ self.weights(g)

    def grid_inner(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Quadrature of ``a(x) b(x)`` over (0, L) from grid samples."""
        return self.h * np.einsum("...m,...m->...", a, b)

    def field(self, coeffs) -> SpectralField:
        return SpectralField(np.asarray(coeffs, dtype=float), self)

    def zeros(self, *batch: int) -> SpectralField:
        return SpectralField(np.zeros((*batch, self.N)), self)

    def unit(self, n: int) -> SpectralField:
        c = np.zeros(self.N)
        c[n - 1] = 1.0
        return SpectralField(c, self)


@dataclass(frozen=True)
class SpectralField:
    """A state given by its eigen-coefficients (possibly a batch of states)."""

    coeffs: np.ndarray
    space: GalerkinSpace = field(repr=False)

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.ndim == 0 or c.shape[-1] != self.space.N:
            raise UsageError(
                f"coefficient array of shape {c.shape} does not match N={self.space.N}"
            )
        if not np.all(np.isfinite(c)):
            raise UsageError("field coefficients must be finite")
        object.__setattr__(self, "coeffs", c)

    def _same_space(self, other: SpectralField):
        if other.space != self.space:
            raise UsageError("fields live on different spaces")

    def __add__(self, other: SpectralField) -> SpectralField:
        self._same_space(other)
        return SpectralField(self.coeffs + other.coeffs, self.space)

    def __sub__(self, other: SpectralField) -> SpectralField:
        self._same_space(other)
        return SpectralField(self.coeffs - other.coeffs, self.space)

    def __mul__(self, k: float) -> SpectralField:
        return SpectralField(self.coeffs * k, self.space)

    __rmul__ = __mul__

    def norm(self, g: float = 0.0):
        return norm_gamma(self, g)

    def grid_values(self) -> np.ndarray:
        return to_grid(self)


def eigenvalue(space: GalerkinSpace, n: int) -> float:
    """Return ``lambda_n = -(n pi / L)^2`` for ``1 <= n <= N``."""
    if not 1 <= n <= space.N:
        raise UsageError(f"mode index {n} outside 1..{space.N}")
    return -((n * np.pi / space.L) ** 2)


def eval_field(u: SpectralField, x):
    """Evaluate the sine expansion at position(s) ``x`` in [0, L]."""
    space = u.space
    xs = np.asarray(x, dtype=float)
    if np.any(xs < 0) or np.any(xs > space.L):
        raise UsageError(f"positions must lie in [0, {space.L}]")
    phi = np.sqrt(2.0 / space.L) * np.sin(np.multiply.outer(space.modes, xs) * np.pi / space.L)
    out = np.tensordot(u.coeffs, phi, axes=([-1], [0]))
    return float(out) if out.ndim == 0 else out


def norm_gamma(u: SpectralField, g: float):
    """Fractional norm ``||(-A)^g u||`` from exact eigenvalue weights."""
    if g < 0:
        raise UsageError(f"norm exponent must be >= 0, got {g}")
    out = np.sqrt(u.space.norm_sq(u.coeffs, g))
    return float(out) if np.ndim(out) == 0 else out


def semigroup_apply(u: SpectralField, t: float) -> SpectralField:
    """Apply ``e^{tA}`` mode by mode."""
    if t < 0:
        raise UsageError(f"semigroup time must be >= 0, got {t}")
    return SpectralField(u.coeffs * np.exp(u.space.lambdas * t), u.space)


def to_grid(u: SpectralField) -> np.ndarray:
    return u.space.coeffs_to_grid(u.coeffs)


def from_grid(values, space: GalerkinSpace) -> SpectralField:
    """Discrete sine projection of grid samples onto the first N modes."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 0 or values.shape[-1] != space.M:
        raise UsageError(f"grid array of shape {values.shape} does not match M={space.M}")
    return SpectralField(space.grid_to_coeffs(values), space)
