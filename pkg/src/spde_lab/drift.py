"""Polynomial reaction term, its Nemytskii operator and hypothesis certificates.

The drift is ``f(t) = a_1 t + a_2 t^2 + ... + a_d t^d`` acting pointwise on
field values.  For odd ``d`` with ``a_d < 0`` the module produces

* a splitting ``f = g1 + g2`` with ``g1`` nonincreasing and ``g2`` Lipschitz
  (constant ``kappa``) and supported on a bounded interval,
* a coercivity function ``rho(r) = (a_d / 2) L^-n r^(n+1) + C`` bounding the
  pairing ``<F(u), u>`` by a function of ``||u||^2``,
* the constants ``K_lambda`` with ``<F(v), v> <= -lambda ||v||^2 + K_lambda``,
* a growth modulus ``a(r)`` for the sup-norm duality pairing,

together with sampling validators for each inequality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial import Polynomial as NpPoly
from scipy.optimize import minimize_scalar

from .errors import ConfigError, UsageError
from .spectral import GalerkinSpace, SpectralField

ABS_TOL = 1e-9
REL_TOL = 1e-12


class Polynomial:
    """Polynomial without constant term, ``coefficients[k-1] = a_k``."""

    def __init__(self, coefficients):
        c = [float(a) for a in coefficients]
        while c and c[-1] == 0.0:
            c.pop()
        self.coefficients = tuple(c)

    @property
    def degree(self) -> int:
        return len(self.coefficients)

    @property
    def leading(self) -> float:
        return self.coefficients[-1] if self.coefficients else 0.0

    @property
    def is_zero(self) -> bool:
        return not self.coefficients

    def __call__(self, t):
        return evaluate_f(self, t)

    def __eq__(self, other):
        return isinstance(other, Polynomial) and self.coefficients == other.coefficients

    def __hash__(self):
        return hash(self.coefficients)

    def __repr__(self):
        return f"{type(self).__name__}({list(self.coefficients)})"

    def as_numpy(self) -> NpPoly:
        return NpPoly((0.0, *self.coefficients))

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for k in range(self.degree, 0, -1):
            out = out * t + k * self.coefficients[k - 1]
        return out


class OddPolynomial(Polynomial):
    """Odd-degree polynomial with negative leading coefficient."""

    def __init__(self, coefficients):
        super().__init__(coefficients)
        if self.is_zero or self.degree % 2 == 0:
            raise ConfigError(
                f"drift polynomial must have odd degree, got degree {self.degree}"
            )
        if self.leading >= 0:
            raise ConfigError(
                f"drift leading coefficient must be negative, got {self.leading}"
            )

    @property
    def n(self) -> int:
        """Half-degree index with ``d = 2n + 1``."""
        return (self.degree - 1) // 2


def evaluate_f(p: Polynomial, t):
    """Horner evaluation of ``f(t)``."""
    t = np.asarray(t, dtype=float)
    acc = np.zeros_like(t)
    for a in reversed(p.coefficients):
        acc = acc * t + a
    out = acc * t
    return float(out) if out.ndim == 0 else out


def nemytskii_F(p: Polynomial, u: SpectralField) -> SpectralField:
    """Galerkin projection of ``x -> f(u(x))``."""
    space = u.space
    if not space.supports_degree(p.degree):
        raise ConfigError(
            f"grid M={space.M} aliases degree-{p.degree} drift; need M >= "
            f"{space.min_grid(space.N, p.degree)}"
        )
    grid = space.coeffs_to_grid(u.coeffs)
    return SpectralField(space.grid_to_coeffs(evaluate_f(p, grid)), space)


def _real_roots(poly: NpPoly) -> np.ndarray:
    # real parts of all roots: near-double roots come back with tiny imaginary
    # parts, and extra candidates can only tighten a maximisation
    if poly.degree() < 1:
        return np.empty(0)
    return np.sort(poly.roots().real)


@dataclass(frozen=True)
class DriftSplit:
    """``f = g1 + g2`` with ``g1`` nonincreasing and ``g2`` kappa-Lipschitz."""

    poly: Polynomial = field(repr=False)
    zeta1: float
    zeta2: float
    slope: float
    intercept: float
    kappa: float
    g2_sup: float

    @property
    def degenerate(self) -> bool:
        return self.zeta1 == self.zeta2

    def line(self, s):
        return self.slope * np.asarray(s, dtype=float) + self.intercept

    def g1(self, s):
        s = np.asarray(s, dtype=float)
        if self.degenerate:
            return evaluate_f(self.poly, s)
        inside = (s > self.zeta1) & (s < self.zeta2)
        return np.where(inside, self.line(s), evaluate_f(self.poly, s))

    def g2(self, s):
        s = np.asarray(s, dtype=float)
        if self.degenerate:
            return np.zeros_like(s)
        inside = (s > self.zeta1) & (s < self.zeta2)
        return np.where(inside, evaluate_f(self.poly, s) - self.line(s), 0.0)


def split_drift(p: OddPolynomial) -> DriftSplit:
    """Split ``f`` into a dissipative part plus a bounded Lipschitz bump.

    Outside ``[zeta1, zeta2]`` ``g1 = f``; inside, ``g1`` is the chord through
    ``(zeta1, f(zeta1))`` and ``(zeta2, f(zeta2))``.
    """
    fp = p.as_numpy().deriv()
    fpp = fp.deriv()
    crit = _real_roots(fpp)
    if fp.degree() == 0:
        fp_max = fp.coef[0]
    else:
        fp_max = max(fp(crit)) if len(crit) else -math.inf
    if fp_max <= 0:
        return DriftSplit(p, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    c = fp.coef
    zeta = 1.0 + max(abs(ck / c[-1]) for ck in c[:-1])
    while not evaluate_f(p, -zeta) > evaluate_f(p, zeta):
        zeta *= 2.0
    z1, z2 = -zeta, zeta
    f1, f2 = evaluate_f(p, z1), evaluate_f(p, z2)
    slope = (f2 - f1) / (z2 - z1)
    intercept = f1 - slope * z1

    inner = crit[(crit > z1) & (crit < z2)]
    pts = np.concatenate(([z1, z2], inner))
    kappa = float(np.max(np.abs(fp(pts) - slope)))

    # extrema of f - line are where f' = slope
    bump = p.as_numpy() - NpPoly((intercept, slope))
    bcrit = _real_roots(bump.deriv())
    bcrit = bcrit[(bcrit > z1) & (bcrit < z2)]
    g2_sup = float(np.max(np.abs(bump(np.concatenate(([z1, z2], bcrit))))))
    return DriftSplit(p, float(z1), float(z2), float(slope), float(intercept), kappa, g2_sup)


@dataclass(frozen=True)
class Rho:
    """``rho(r) = lead * r^(n+1) + C`` with ``lead = (a_d / 2) L^-n``."""

    lead: float
    n: int
    C: float

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        out = self.lead * r ** (self.n + 1) + self.C
        return float(out) if out.ndim == 0 else out


def _young_constant(p: OddPolynomial) -> float:
    n = p.n
    lower = [(k, a) for k, a in enumerate(p.coefficients[:-1], start=1) if a != 0]
    if not lower:
        return 0.0
    budget = abs(p.leading) / 2.0
    eps = budget / sum(abs(a) * (k + 1) / (2 * n + 2) for k, a in lower)
    total = 0.0
    for k, a in lower:
        q = (2 * n + 2) / (2 * n + 1 - k)
        total += abs(a) / q * eps ** (-(k + 1) / (2 * n + 1 - k))
    return total


def _sharp_constant(p: OddPolynomial) -> float:
    # max over s of sum_{k<d} a_k s^(k+1) - (|a_d|/2) s^(d+1)
    coef = np.zeros(p.degree + 2)
    for k, a in enumerate(p.coefficients[:-1], start=1):
        coef[k + 1] = a
    coef[p.degree + 1] = -abs(p.leading) / 2.0
    g = NpPoly(coef)
    cand = np.concatenate(([0.0], _real_roots(g.deriv())))
    return max(0.0, float(np.max(g(cand))))


def rho_certificate(p: OddPolynomial, L: float, method: str = "sharp") -> Rho:
    """Coercivity bound ``<F(u), u> <= rho(||u||_0^2)`` on (0, L).

    ``method="young"`` follows the textbook Young-inequality bookkeeping;
    ``"sharp"`` maximises the scalar remainder exactly and is never larger.
    """
    if method == "sharp":
        per_length = _sharp_constant(p)
    elif method == "young":
        per_length = _young_constant(p)
    else:
        raise UsageError(f"unknown rho method {method!r}")
    n = p.n
    return Rho(lead=p.leading / 2.0 * L ** (-n), n=n, C=per_length * L)


def k_lambda(rho: Rho, lam: float) -> float:
    """Smallest ``K`` with ``rho(r) <= -lam r + K`` for all ``r >= 0``."""
    if lam < 0:
        raise UsageError(f"lambda must be >= 0, got {lam}")
    c = -rho.lead
    n = rho.n
    if n == 0:
        return rho.C if lam <= c else math.inf
    if lam == 0:
        return rho.C
    r_star = (lam / ((n + 1) * c)) ** (1.0 / n)
    return rho.C + lam * r_star * n / (n + 1)


def compute_a(p: Polynomial, r: float, samples: int = 4001) -> float:
    """Growth modulus for the sup-norm duality pairing.

    Returns ``sup max(0, f(s + z) sign(s)) / (1 + |s|)`` over ``|z| <= r``.
    The inner maximum over ``z`` is exact (interval extrema of ``f``); the
    outer one over ``s`` is a grid search refined by a bounded scalar solve.
    """
    if r < 0:
        raise UsageError(f"radius must be >= 0, got {r}")
    poly = p.as_numpy()
    roots = poly.roots()
    root_mag = float(np.max(np.abs(roots.real[np.abs(roots.imag) < 1e-10]))) if len(roots) else 0.0
    crit = _real_roots(poly.deriv())

    s0 = r + root_mag + 1.0
    zs = np.linspace(-r, r, 33)
    while True:
        tail = np.linspace(s0, 2.0 * s0, 65)
        plus = evaluate_f(p, tail[:, None] + zs[None, :])
        minus = -evaluate_f(p, -tail[:, None] + zs[None, :])
        if np.all(plus <= 0) and np.all(minus <= 0):
            break
        s0 *= 2.0

    def interval_extreme(s, sign):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        lo, hi = s - r, s + r
        cand = [evaluate_f(p, lo), evaluate_f(p, hi)]
        for c in crit:
            v = np.where((lo < c) & (c < hi), evaluate_f(p, c), -sign * np.inf)
            cand.append(v)
        stack = np.vstack(cand)
        return stack.max(axis=0) if sign > 0 else stack.min(axis=0)

    def h_plus(s):
        return interval_extreme(s, 1) / (1.0 + s)

    def h_minus(s):
        # s here is |s| for the negative branch
        return -interval_extreme(-np.asarray(s), -1) / (1.0 + np.asarray(s))

    best = 0.0
    grid = np.linspace(0.0, s0, samples)
    for h in (h_plus, h_minus):
        vals = h(grid)
        i = int(np.argmax(vals))
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, samples - 1)]
        res = minimize_scalar(lambda s: -float(h(s)[0]), bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-12})
        best = max(best, float(vals[i]), -float(res.fun))
    return best


@dataclass(frozen=True)
class HypothesisReport:
    """Outcome of a sampling validator; violations are reported, not raised."""

    name: str
    checked: int
    violations: int
    worst_margin: float

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def __bool__(self):
        return self.passed


def _report(name, lhs, rhs, scale=None):
    lhs = np.atleast_1d(lhs)
    rhs = np.atleast_1d(rhs)
    if scale is None:
        scale = np.maximum(np.abs(lhs), np.abs(rhs))
    tol = ABS_TOL + REL_TOL * np.atleast_1d(scale)
    margin = lhs - rhs
    return HypothesisReport(name, int(margin.size), int(np.sum(margin > tol)),
                            float(np.max(margin)) if margin.size else -math.inf)


def check_h3(p: Polynomial, split: DriftSplit, u: SpectralField, v: SpectralField):
    """One-sided Lipschitz bound of ``F`` and dissipativity of ``g1``.

    Returns the pair (pairing report, pointwise-dissipativity report).
    """
    if u.space != v.space:
        raise UsageError("fields must live on the same space")
    space = u.space
    diff = u.coeffs - v.coeffs
    Fu = nemytskii_F(p, u).coeffs
    Fv = nemytskii_F(p, v).coeffs
    lhs = np.einsum("...n,...n->...", Fu - Fv, diff)
    rhs = split.kappa * space.norm_sq(diff)
    pairing = _report("H3", lhs, rhs, scale=np.abs(Fu - Fv).sum(-1) * np.abs(diff).sum(-1))

    gu, gv = space.coeffs_to_grid(u.coeffs), space.coeffs_to_grid(v.coeffs)
    prod = (split.g1(gu) - split.g1(gv)) * (gu - gv)
    scale = np.abs(split.g1(gu)) * np.abs(gu) + np.abs(split.g1(gv)) * np.abs(gv)
    dissip = _report("g1-dissipative", prod.ravel(), np.zeros(prod.size), scale=scale.ravel())
    return pairing, dissip


def check_h4(p: Polynomial, rho: Rho, u: SpectralField) -> HypothesisReport:
    """``<F(u), u> <= rho(||u||_0^2)`` samplewise."""
    lhs = np.einsum("...n,...n->...", nemytskii_F(p, u).coeffs, u.coeffs)
    r = u.space.norm_sq(u.coeffs)
    rhs = rho(r)
    return _report("H4", lhs, rhs, scale=np.abs(lhs) + np.abs(rho.lead) * r ** (rho.n + 1))


def check_k_lambda(p: Polynomial, rho: Rho, u: SpectralField, lam: float) -> HypothesisReport:
    """``<F(v), v> <= -lam ||v||_0^2 + K_lam`` samplewise."""
    lhs = np.einsum("...n,...n->...", nemytskii_F(p, u).coeffs, u.coeffs)
    r = u.space.norm_sq(u.coeffs)
    rhs = -lam * r + k_lambda(rho, lam)
    return _report(f"K_lambda({lam:g})", lhs, rhs, scale=np.abs(lhs) + lam * r)


def check_h2(p: Polynomial, y: SpectralField, z: SpectralField,
             a: Callable[[float], float]) -> HypothesisReport:
    """Sup-norm duality pairing ``f(y* + z*) sign(y*) <= a(|z|_sup)(1 + |y|_sup)``.

    ``y*``, ``z*`` are the values at the grid point where ``|y|`` peaks; the
    canonical subgradient of the sup norm at ``y`` is the signed point mass
    there.
    """
    if y.space != z.space:
        raise UsageError("fields must live on the same space")
    space = y.space
    gy = np.atleast_2d(space.coeffs_to_grid(y.coeffs))
    gz = np.atleast_2d(space.coeffs_to_grid(z.coeffs))
    idx = np.argmax(np.abs(gy), axis=-1)
    rows = np.arange(gy.shape[0])
    ys, zs = gy[rows, idx], gz[rows, idx]
    lhs = np.where(ys == 0, 0.0, evaluate_f(p, ys + zs) * np.sign(ys))
    ysup = np.abs(gy).max(axis=-1)
    zsup = np.abs(gz).max(axis=-1)
    rhs = np.array([a(float(r)) for r in zsup]) * (1.0 + ysup)
    return _report("H2", lhs, rhs)


def random_fields(space: GalerkinSpace, count: int, rng: np.random.Generator,
                  sup_bound: float = 3.0, decay: float = 1.0) -> SpectralField:
    """Batch of random fields whose grid sup-norm is at most ``sup_bound``."""
    raw = rng.standard_normal((count, space.N)) * space.modes ** (-decay)
    peak = np.abs(space.coeffs_to_grid(raw)).max(axis=-1)
    scale = rng.uniform(0.0, 1.0, count) * sup_bound / np.where(peak > 0, peak, 1.0)
    return SpectralField(raw * scale[:, None], space)


@dataclass(frozen=True)
class DissipativityCertificate:
    """All drift/noise constants needed by the invariant-measure checks."""

    poly: OddPolynomial
    split: DriftSplit
    rho: Rho
    lambda_star: float
    K_lambda_star: float
    D: float
    D_literal: float
    lipschitz: float
    c_omega: float
    omega: float
    L_domain: float
    rho_method: str = "sharp"

    def K(self, lam: float) -> float:
        return k_lambda(self.rho, lam)

    @property
    def feller_rate(self) -> float:
        """Gronwall exponent ``2 (kappa - omega) + L^2``."""
        return 2.0 * (self.split.kappa - self.omega) + self.lipschitz**2

    @property
    def feller_rate_literal(self) -> float:
        """Exponent with ``L`` in place of ``L^2``, reported for comparison."""
        return 2.0 * (self.split.kappa - self.omega) + self.lipschitz

    def to_dict(self) -> dict:
        return {
            "coefficients": list(self.poly.coefficients),
            "zeta1": self.split.zeta1,
            "zeta2": self.split.zeta2,
            "slope": self.split.slope,
            "intercept": self.split.intercept,
            "kappa": self.split.kappa,
            "g2_sup": self.split.g2_sup,
            "C": self.rho.C,
            "rho_lead": self.rho.lead,
            "rho_n": self.rho.n,
            "rho_method": self.rho_method,
            "lambda_star": self.lambda_star,
            "K_lambda_star": self.K_lambda_star,
            "c_omega": self.c_omega,
            "omega": self.omega,
            "D": self.D,
            "D_literal": self.D_literal,
            "lipschitz": self.lipschitz,
            "L_domain": self.L_domain,
        }

    @classmethod
    def from_dict(cls, d: dict) -> DissipativityCertificate:
        poly = OddPolynomial(d["coefficients"])
        split = DriftSplit(poly, d["zeta1"], d["zeta2"], d["slope"], d["intercept"],
                           d["kappa"], d["g2_sup"])
        rho = Rho(d["rho_lead"], int(d["rho_n"]), d["C"])
        return cls(poly, split, rho, d["lambda_star"], d["K_lambda_star"], d["D"],
                   d["D_literal"], d["lipschitz"], d["c_omega"], d["omega"], d["L_domain"],
                   d.get("rho_method", "sharp"))


def build_certificate(p: OddPolynomial, space: GalerkinSpace, D: float, D_literal: float,
                      lipschitz: float, lambda_star: float | None = None,
                      rho_method: str = "sharp") -> DissipativityCertificate:
    """Assemble a certificate; ``lambda_star`` defaults to ``D + 1``."""
    if lambda_star is None:
        lambda_star = D + 1.0
    if not lambda_star > D:
        raise ConfigError(f"lambda_star={lambda_star} must exceed D={D}")
    rho = rho_certificate(p, space.L, rho_method)
    return DissipativityCertificate(
        poly=p, split=split_drift(p), rho=rho, lambda_star=lambda_star,
        K_lambda_star=k_lambda(rho, lambda_star), D=D, D_literal=D_literal,
        lipschitz=lipschitz, c_omega=space.c_omega, omega=space.omega,
        L_domain=space.L, rho_method=rho_method,
    )
