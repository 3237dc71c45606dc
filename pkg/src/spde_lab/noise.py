"""Truncated Q-Wiener noise and the diffusion operators ``B``.

The cylindrical process is represented in the eigenbasis of ``A``; mode
``n`` carries weight ``q_n`` (the diagonal of ``Q^{1/2}``).  Two families of
``B`` are supported:

``additive``
    ``B(u) e_n = q_n e_n`` regardless of ``u``.
``nemytskii``
    ``B(u) e_n`` is the projection of ``x -> sigma(u(x)) q_n e_n(x)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .drift import HypothesisReport
from .errors import ConfigError, UsageError
from .rng import NormalStream
from .spectral import GalerkinSpace, SpectralField

KINDS = ("additive", "nemytskii")


@dataclass(frozen=True)
class Sigma:
    """Scalar noise profile with a declared Lipschitz constant."""

    name: str = "const"
    params: dict = field(default_factory=dict)
    declared_lip: float | None = None

    def __post_init__(self):
        if self.name not in ("const", "sin", "clipped-linear"):
            raise ConfigError(f"unknown sigma profile {self.name!r}")
        if self.declared_lip is not None and self.declared_lip < self.intrinsic_lip:
            raise ConfigError(
                f"declared Lipschitz constant {self.declared_lip} is below the profile's {self.intrinsic_lip}"
            )

    def _p(self, key, default):
        return float(self.params.get(key, default))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.name == "const":
            return np.full_like(t, self._p("value", 1.0))
        if self.name == "sin":
            return self._p("offset", 1.0) + self._p("amplitude", 0.5) * np.sin(t)
        clip = self._p("clip", 1.0)
        return self._p("offset", 1.0) + self._p("slope", 1.0) * np.clip(t, -clip, clip)

    @property
    def lip(self) -> float:
        """Declared constant if given, else the profile's own."""
        return self.intrinsic_lip if self.declared_lip is None else float(self.declared_lip)

    @property
    def intrinsic_lip(self) -> float:
        if self.name == "const":
            return 0.0
        if self.name == "sin":
            return abs(self._p("amplitude", 0.5))
        return abs(self._p("slope", 1.0))

    @property
    def at_zero(self) -> float:
        return float(self(0.0))

    def to_dict(self) -> dict:
        return {"name": self.name, "params": dict(self.params), "lip": self.lip}


@dataclass(frozen=True)
class NoiseSpec:
    kind: str
    weights: np.ndarray
    sigma: Sigma = field(default_factory=Sigma)
    beta: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"noise kind must be one of {KINDS}, got {self.kind!r}")
        w = np.asarray(self.weights, dtype=float)
        if not np.all(np.isfinite(w)):
            raise ConfigError("noise weights must be finite")
        object.__setattr__(self, "weights", w)
        if self.kind == "nemytskii" and np.any(w != 0):
            if self.beta is None or self.beta <= 0.5:
                raise ConfigError(
                    "multiplicative noise needs square-summable weights: decay "
                    f"exponent beta must exceed 1/2, got {self.beta}"
                )
        if not math.isfinite(self.sigma.lip):
            raise ConfigError("sigma must have a finite Lipschitz constant")

    @classmethod
    def from_decay(cls, space: GalerkinSpace, kind: str, q0: float, beta: float,
                   sigma: Sigma | None = None) -> NoiseSpec:
        """Weights ``q_n = q0 n^-beta``."""
        w = q0 * space.modes.astype(float) ** (-beta)
        return cls(kind, w, sigma or Sigma(), beta)

    @property
    def is_zero(self) -> bool:
        if not np.any(self.weights):
            return True
        return self.kind == "nemytskii" and self.sigma.name == "const" and self.sigma.at_zero == 0

    @property
    def trace(self) -> float:
        """``sum q_n^2`` at truncation."""
        return float(np.sum(self.weights**2))

    def increment(self, space: GalerkinSpace, coeffs, grid_u, dW) -> np.ndarray:
        """Coefficients of ``B(u) dW`` for raw arrays (batch axes allowed).

        ``grid_u`` are the grid values of ``u``; only the multiplicative kind
        reads them and it may be ``None`` otherwise.
        """
        qdw = self.weights * dW
        if self.kind == "additive":
            return qdw
        w = space.coeffs_to_grid(qdw)
        if grid_u is None:
            grid_u = space.coeffs_to_grid(coeffs)
        return space.grid_to_coeffs(self.sigma(grid_u) * w)

    def hs_sq(self, space: GalerkinSpace, coeffs) -> np.ndarray:
        """``||B(u)||_HS^2`` for raw coefficient arrays."""
        if self.kind == "additive":
            return np.broadcast_to(self.trace, np.shape(coeffs)[:-1]).astype(float)
        s2 = self.sigma(space.coeffs_to_grid(coeffs)) ** 2
        # int s(x)^2 e_n(x)^2 dx for every n, weighted by q_n^2
        e2 = (self.weights**2) @ space.basis**2
        return space.h * s2 @ e2

    def hs_dist_sq(self, space: GalerkinSpace, a, b) -> np.ndarray:
        """``||B(u) - B(v)||_HS^2`` for raw coefficient arrays."""
        if self.kind == "additive":
            return np.zeros(np.shape(a)[:-1])
        ds2 = (self.sigma(space.coeffs_to_grid(a)) - self.sigma(space.coeffs_to_grid(b))) ** 2
        e2 = (self.weights**2) @ space.basis**2
        return space.h * ds2 @ e2

    def to_dict(self) -> dict:
        return {"kind": self.kind, "weights": self.weights.tolist(),
                "sigma": self.sigma.to_dict(), "beta": self.beta}


@dataclass(frozen=True)
class WienerIncrement:
    dW: np.ndarray
    dt: float


def wiener_increment(space: GalerkinSpace, dt: float, rng_state) -> WienerIncrement:
    """Mode-wise increment of the truncated cylindrical process.

    ``rng_state`` is ``(seed, stream, step)``; the same triple always yields
    the same increment, and it matches the increment ``simulate`` uses at
    that step.
    """
    if dt < 0:
        raise UsageError(f"time step must be >= 0, got {dt}")
    seed, stream, step = rng_state
    z = NormalStream(seed, stream, space.N).rows(step, 1)[0]
    return WienerIncrement(z * math.sqrt(dt), dt)


def apply_B(spec: NoiseSpec, u: SpectralField, dW: WienerIncrement | np.ndarray) -> SpectralField:
    inc = dW.dW if isinstance(dW, WienerIncrement) else np.asarray(dW, dtype=float)
    if inc.shape[-1] != u.space.N:
        raise UsageError("increment and field dimensions differ")
    return SpectralField(spec.increment(u.space, u.coeffs, None, inc), u.space)


def hs_norm(spec: NoiseSpec, u: SpectralField):
    out = np.sqrt(spec.hs_sq(u.space, u.coeffs))
    return float(out) if np.ndim(out) == 0 else out


def hs_distance(spec: NoiseSpec, u: SpectralField, v: SpectralField):
    out = np.sqrt(spec.hs_dist_sq(u.space, u.coeffs, v.coeffs))
    return float(out) if np.ndim(out) == 0 else out


def lipschitz_bound(spec: NoiseSpec, space: GalerkinSpace) -> float:
    """``L`` with ``||B(u) - B(v)||_HS <= L ||u - v||_0``.

    Uses ``||e_n||_inf = sqrt(2 / L_domain)``.
    """
    if spec.kind == "additive":
        return 0.0
    return spec.sigma.lip * math.sqrt(2.0 / space.L) * math.sqrt(spec.trace)


def d_constant(spec: NoiseSpec, space: GalerkinSpace) -> tuple[float, float]:
    """Linear-growth constants ``(D_safe, D_literal)``.

    ``D_safe = 2 max(L^2, ||B(0)||_HS^2)`` certifies
    ``||B(u)||_HS^2 <= D (1 + ||u||^2)``; ``D_literal`` omits the factor 2.
    """
    lip = lipschitz_bound(spec, space)
    b0 = float(spec.hs_sq(space, np.zeros(space.N)))
    literal = max(lip, math.sqrt(b0)) ** 2
    return 2.0 * literal, literal


def check_lipschitz(spec: NoiseSpec, u: SpectralField, v: SpectralField, tol: float = 1e-9) -> HypothesisReport:
    lhs = np.atleast_1d(hs_distance(spec, u, v))
    rhs = lipschitz_bound(spec, u.space) * np.atleast_1d(np.sqrt(u.space.norm_sq(u.coeffs - v.coeffs)))
    m = lhs - rhs
    return HypothesisReport("lipschitz", m.size, int(np.sum(m > tol)), float(m.max()))


def check_growth(spec: NoiseSpec, u: SpectralField, tol: float = 1e-9) -> HypothesisReport:
    D, _ = d_constant(spec, u.space)
    lhs = np.atleast_1d(spec.hs_sq(u.space, u.coeffs))
    rhs = D * (1.0 + np.atleast_1d(u.space.norm_sq(u.coeffs)))
    m = lhs - rhs
    return HypothesisReport("linear-growth", m.size, int(np.sum(m > tol)), float(m.max()))
