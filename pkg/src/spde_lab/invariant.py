"""Occupation measures and the diagnostics built on them.

``OccupationMeasure`` is the empirical Krylov-Bogoliubov average
``mu_T = (1/T) int_0^T law(u(t)) dt``: Cesaro averages of per-step
observables over a time window, pooled over an ensemble, plus a uniform
reservoir of snapshot fields.  It is fed chunk by chunk by ``simulate`` or
built afterwards from a stored ``Trajectory``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .drift import DissipativityCertificate, Polynomial
from .errors import ConfigError, UsageError
from .integrator import SimParams, Trajectory, simulate
from .noise import NoiseSpec
from .rng import philox
from .spectral import GalerkinSpace, SpectralField

Z95 = 1.959963984540054


def _halfwidth(per_member: np.ndarray) -> float:
    n = per_member.size
    if n < 2:
        return 0.0
    return float(Z95 * per_member.std(ddof=1) / math.sqrt(n))


class OccupationMeasure:
    """Streaming time average over the window ``burn_in < t <= horizon``.

    Accumulators are kept per ensemble member, so confidence half-widths can
    be computed from the spread across independent trajectories.
    """

    def __init__(self, space: GalerkinSpace, horizon: float, burn_in: float = 0.0, *,
                 capacity: int = 256, reservoir_stride: int = 1, radii=(),
                 norm_edges=None, mode_edges=None, seed: int = 0, stream: int = 0):
        if not horizon > burn_in:
            raise UsageError(f"empty window: horizon {horizon} <= burn_in {burn_in}")
        self.space = space
        self.horizon = float(horizon)
        self.burn_in = float(burn_in)
        self.capacity = capacity
        self.reservoir_stride = reservoir_stride
        self.radii = np.asarray(sorted(radii), dtype=float)
        self.norm_edges = np.linspace(0.0, 4.0, 81) if norm_edges is None else np.asarray(norm_edges)
        self.mode_edges = np.linspace(-2.0, 2.0, 81) if mode_edges is None else np.asarray(mode_edges)
        self._rng = philox(seed, "reservoir", stream)
        self.count = None
        self.reservoir: list[np.ndarray] = []
        self.reservoir_times: list[float] = []
        self.offered = 0

    def _init(self, R: int, n_modes: int):
        self.count = np.zeros(R, dtype=np.int64)
        self.sum_norm0_sq = np.zeros(R)
        self.sum_normg_sq = np.zeros(R)
        self.sum_modes = np.zeros((R, n_modes))
        self.sum_modes_sq = np.zeros((R, n_modes))
        self.tail_counts = np.zeros((R, self.radii.size), dtype=np.int64)
        self.hist_norm0 = np.zeros(len(self.norm_edges) - 1, dtype=np.int64)
        self.hist_mode1 = np.zeros(len(self.mode_edges) - 1, dtype=np.int64)

    def _window(self, times):
        return (times > self.burn_in) & (times <= self.horizon * (1 + 1e-12))

    def add_observables(self, times, norm0, normg, modes):
        """Accumulate observables of shape ``(count, R)`` / ``(count, R, K)``."""
        times = np.asarray(times)
        sel = self._window(times)
        if self.count is None:
            self._init(norm0.shape[1], modes.shape[-1])
        if not np.any(sel):
            return
        n0, ng, md = norm0[sel], normg[sel], modes[sel]
        self.count += n0.shape[0]
        self.sum_norm0_sq += np.sum(n0**2, axis=0)
        self.sum_normg_sq += np.sum(ng**2, axis=0)
        self.sum_modes += md.sum(axis=0)
        self.sum_modes_sq += (md**2).sum(axis=0)
        if self.radii.size:
            self.tail_counts += np.sum(ng[..., None] > self.radii, axis=0)
        self.hist_norm0 += np.histogram(np.clip(n0, self.norm_edges[0], self.norm_edges[-1]),
                                        self.norm_edges)[0]
        self.hist_mode1 += np.histogram(np.clip(md[..., 0], self.mode_edges[0], self.mode_edges[-1]),
                                        self.mode_edges)[0]

    def offer(self, times, fields):
        """Reservoir sampling (algorithm R) over snapshot fields ``(count, R, N)``."""
        times = np.asarray(times)
        sel = self._window(times)
        if not np.any(sel):
            return
        items = fields[sel].reshape(-1, fields.shape[-1])
        item_times = np.repeat(times[sel], fields.shape[1])
        fill = min(self.capacity - len(self.reservoir), len(items))
        for f, t in zip(items[:fill], item_times[:fill]):
            self.reservoir.append(f.copy())
            self.reservoir_times.append(float(t))
        rest = items[fill:]
        if len(rest):
            seen = self.offered + fill + 1 + np.arange(len(rest))
            slots = self._rng.integers(0, seen)
            for i in np.flatnonzero(slots < self.capacity):
                self.reservoir[slots[i]] = rest[i].copy()
                self.reservoir_times[slots[i]] = float(item_times[fill + i])
        self.offered += len(items)

    def observe(self, ks, times, buf):
        """Hook called by ``simulate`` with states ``buf`` of shape ``(count, R, N)``."""
        space = self.space
        norm0 = np.sqrt(np.einsum("krn,krn->kr", buf, buf))
        normg = np.sqrt((buf**2) @ space.weights(space.gamma))
        self.add_observables(times, norm0, normg, buf)
        cand = np.asarray(ks) % self.reservoir_stride == 0
        if np.any(cand):
            self.offer(np.asarray(times)[cand], buf[cand])

    # results ---------------------------------------------------------------
    def _require(self):
        if self.count is None or not np.all(self.count > 0):
            raise UsageError("occupation measure has an empty window")

    @property
    def members(self) -> int:
        return 0 if self.count is None else self.count.size

    def per_member(self, name: str) -> np.ndarray:
        self._require()
        return getattr(self, "sum_" + name) / (self.count if getattr(self, "sum_" + name).ndim == 1
                                               else self.count[:, None])

    @property
    def mean_norm0_sq(self) -> float:
        self._require()
        return float(self.sum_norm0_sq.sum() / self.count.sum())

    @property
    def mean_normg_sq(self) -> float:
        self._require()
        return float(self.sum_normg_sq.sum() / self.count.sum())

    @property
    def mode_mean(self) -> np.ndarray:
        self._require()
        return self.sum_modes.sum(axis=0) / self.count.sum()

    @property
    def mode_second_moment(self) -> np.ndarray:
        self._require()
        return self.sum_modes_sq.sum(axis=0) / self.count.sum()

    @property
    def mode_variance(self) -> np.ndarray:
        return self.mode_second_moment - self.mode_mean**2

    def tail_mass(self, radius: float) -> float:
        self._require()
        i = int(np.argmin(np.abs(self.radii - radius)))
        if not math.isclose(self.radii[i], radius, rel_tol=1e-12):
            raise UsageError(f"radius {radius} was not registered")
        return float(self.tail_counts[:, i].sum() / self.count.sum())

    def reservoir_field(self) -> SpectralField:
        if not self.reservoir:
            raise UsageError("reservoir is empty")
        return SpectralField(np.stack(self.reservoir), self.space)

    def merge(self, other: OccupationMeasure) -> OccupationMeasure:
        """Combine with a measure over a disjoint window of the same ensemble.

        Sums add, so the result equals accumulating the concatenated run up
        to floating-point reassociation.  Reservoirs are merged by drawing
        each slot from either side in proportion to the items each has seen.
        """
        if self.count is None:
            return other
        if other.count is None:
            return self
        out = OccupationMeasure(self.space, max(self.horizon, other.horizon),
                                min(self.burn_in, other.burn_in), capacity=self.capacity,
                                reservoir_stride=self.reservoir_stride, radii=self.radii,
                                norm_edges=self.norm_edges, mode_edges=self.mode_edges)
        out.count = self.count + other.count
        for name in ("sum_norm0_sq", "sum_normg_sq", "sum_modes", "sum_modes_sq", "tail_counts",
                     "hist_norm0", "hist_mode1"):
            setattr(out, name, getattr(self, name) + getattr(other, name))
        out.offered = self.offered + other.offered
        pools = [list(zip(self.reservoir, self.reservoir_times)),
                 list(zip(other.reservoir, other.reservoir_times))]
        weight = self.offered / max(out.offered, 1)
        rng = self._rng
        while len(out.reservoir) < self.capacity and (pools[0] or pools[1]):
            side = 0 if (pools[0] and (not pools[1] or rng.random() < weight)) else 1
            f, t = pools[side].pop(0)
            out.reservoir.append(f)
            out.reservoir_times.append(t)
        return out

    def histogram_rows(self, which: str = "norm0"):
        edges, counts = ((self.norm_edges, self.hist_norm0) if which == "norm0"
                         else (self.mode_edges, self.hist_mode1))
        total = counts.sum()
        mass = counts / total if total else counts.astype(float)
        return [(edges[i], edges[i + 1], mass[i]) for i in range(len(counts))]


def accumulate(traj: Trajectory, burn_in: float, **kwargs) -> OccupationMeasure:
    """Occupation measure of a stored trajectory over ``(burn_in, T]``.

    Per-mode moments cover the modes recorded in ``traj.modes``; the
    reservoir draws from the stored snapshots.
    """
    if not traj.params.T > burn_in:
        raise UsageError(f"trajectory horizon {traj.params.T} does not exceed burn_in {burn_in}")
    if traj.norm0.size == 0:
        raise UsageError("trajectory was simulated without recording observables")
    m = OccupationMeasure(traj.space, traj.params.T, burn_in, **kwargs)
    R = int(np.prod(traj.batch_shape, dtype=int))
    n = traj.times.size
    m.add_observables(traj.times, traj.norm0.reshape(n, R), traj.norm_gamma.reshape(n, R),
                      traj.modes.reshape(n, R, -1))
    snaps = traj.snapshots.reshape(len(traj.snapshot_times), R, traj.space.N)
    m.offer(traj.snapshot_times, snaps)
    if not np.all(m.count > 0):
        raise UsageError("no time steps inside the window")
    return m


def ou_oracle(space: GalerkinSpace, noise: NoiseSpec, drift: Polynomial | None = None) -> np.ndarray:
    """Stationary per-mode variances ``q_n^2 / (2 |lambda_n|)`` of the linear equation."""
    if drift is not None and not drift.is_zero:
        raise UsageError("the OU oracle only applies to the zero drift")
    if noise.kind != "additive":
        raise UsageError("the OU oracle needs additive noise")
    return noise.weights**2 / (2.0 * np.abs(space.lambdas))


def sample_ou_stationary(space: GalerkinSpace, noise: NoiseSpec, count: int, seed: int = 0) -> SpectralField:
    """Exact draws from the product-Gaussian invariant law of the linear equation."""
    sd = np.sqrt(ou_oracle(space, noise))
    z = philox(seed, "sample", 1).standard_normal((count, space.N))
    return SpectralField(z * sd, space)


# tightness --------------------------------------------------------------------
@dataclass
class TightnessReport:
    empirical_avg: float
    avg_halfwidth: float
    bound: float
    bound_literal: float
    tails: list
    members: int

    @property
    def passed(self) -> bool:
        if self.empirical_avg + self.avg_halfwidth > self.bound:
            return False
        return all(t["mass"] + t["halfwidth"] <= t["bound"] for t in self.tails)

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def to_dict(self) -> dict:
        return {
            "empirical": {"time_avg_norm_gamma_sq": self.empirical_avg,
                          "tail_mass": {repr(float(t['eps'])): t["mass"] for t in self.tails}},
            "bounds": {"time_avg_norm_gamma_sq": self.bound,
                       "time_avg_norm_gamma_sq_literal": self.bound_literal,
                       "tail_mass": {repr(float(t['eps'])): t["bound"] for t in self.tails},
                       "tail_mass_literal": {repr(float(t['eps'])): t["bound_literal"] for t in self.tails},
                       "radius": {repr(float(t['eps'])): t["radius"] for t in self.tails}},
            "verdict": self.verdict,
            "confidence": {"level": 0.95, "members": self.members,
                           "time_avg_halfwidth": self.avg_halfwidth,
                           "tail_halfwidth": {repr(float(t['eps'])): t["halfwidth"] for t in self.tails}},
        }


def tightness_radii(eps_grid) -> list[float]:
    return [1.0 / math.sqrt(e) for e in eps_grid]


def tightness_bound(cert: DissipativityCertificate, x0_norm_sq: float) -> float:
    """``(||x||^2 + K_{lambda*} + D) / (2 c_omega)``."""
    return (x0_norm_sq + cert.K_lambda_star + cert.D) / (2.0 * cert.c_omega)


def tightness_check(measure: OccupationMeasure, cert: DissipativityCertificate, x0: SpectralField,
                    eps_grid=(1e-2, 1e-1, 1.0)) -> TightnessReport:
    """Compare time-averaged ``||u||_gamma^2`` and V_gamma tail masses with their bounds."""
    if not cert.lambda_star > cert.D:
        raise ConfigError(f"lambda_star={cert.lambda_star} must exceed D={cert.D}")
    x2 = float(x0.space.norm_sq(x0.coeffs))
    bound = tightness_bound(cert, x2)
    bound_literal = (x2 + cert.K_lambda_star) / cert.c_omega
    avg_members = measure.per_member("normg_sq")
    tails = []
    for eps in eps_grid:
        r = 1.0 / math.sqrt(eps)
        i = int(np.argmin(np.abs(measure.radii - r)))
        per = measure.tail_counts[:, i] / measure.count
        tails.append({"eps": eps, "radius": r, "mass": measure.tail_mass(r),
                      "halfwidth": _halfwidth(per), "bound": eps * bound,
                      "bound_literal": eps * bound_literal})
    return TightnessReport(measure.mean_normg_sq, _halfwidth(avg_members), bound, bound_literal,
                           tails, measure.members)


# Feller coupling --------------------------------------------------------------
class _GapObserver:
    """Mean-square distance between the two members of each coupled pair."""

    def __init__(self, n_steps: int, pairs: int):
        self.mean = np.zeros(n_steps + 1)
        self.halfwidth = np.zeros(n_steps + 1)
        self.pairs = pairs

    def observe(self, ks, times, buf):
        b = buf.reshape(buf.shape[0], self.pairs, 2, -1)
        gap = np.sum((b[:, :, 1] - b[:, :, 0]) ** 2, axis=-1)
        self.mean[ks] = gap.mean(axis=1)
        if self.pairs > 1:
            self.halfwidth[ks] = Z95 * gap.std(axis=1, ddof=1) / math.sqrt(self.pairs)


@dataclass
class FellerReport:
    times: np.ndarray
    deltas: list
    gaps: dict
    halfwidths: dict
    envelopes: dict
    envelopes_literal: dict
    scaling: dict = field(default_factory=dict)
    scaling_times: tuple = ()

    def passed_delta(self, d) -> bool:
        tol = 1e-12 * self.envelopes[d]
        return bool(np.all(self.gaps[d] + self.halfwidths[d] <= self.envelopes[d] + tol))

    def literal_violations(self, d) -> int:
        """Grid times where the gap exceeds the envelope with exponent ``L`` instead of ``L^2``."""
        return int(np.sum(self.gaps[d] > self.envelopes_literal[d] * (1 + 1e-12)))

    @property
    def scaling_ok(self) -> bool:
        return all(3.0 <= r <= 5.0 for rs in self.scaling.values() for r in rs)

    @property
    def passed(self) -> bool:
        return all(self.passed_delta(d) for d in self.deltas) and self.scaling_ok

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def to_dict(self) -> dict:
        key = lambda d: repr(float(d))
        return {
            "empirical": {"t": self.times.tolist(),
                          "gap": {key(d): self.gaps[d].tolist() for d in self.deltas},
                          "scaling_ratio": {key(d): list(self.scaling.get(d, [])) for d in self.deltas},
                          "scaling_t": list(self.scaling_times)},
            "bounds": {"envelope": {key(d): self.envelopes[d].tolist() for d in self.deltas},
                       "envelope_literal": {key(d): self.envelopes_literal[d].tolist() for d in self.deltas},
                       "literal_violations": {key(d): self.literal_violations(d) for d in self.deltas},
                       "scaling_range": [3.0, 5.0]},
            "verdict": self.verdict,
            "confidence": {"level": 0.95,
                           "gap_halfwidth": {key(d): self.halfwidths[d].tolist() for d in self.deltas}},
        }


def coupled_gap(space: GalerkinSpace, drift: Polynomial, noise: NoiseSpec | None, x: SpectralField,
                delta: float, T: float, dt: float, pairs: int, seed: int = 0,
                direction: SpectralField | None = None):
    """Mean-square gap ``E||u^delta(t) - u(t)||^2`` under common noise.

    Returns ``(times, mean, halfwidth)``.
    """
    d = space.unit(1).coeffs if direction is None else direction.coeffs / np.sqrt(space.norm_sq(direction.coeffs))
    x0 = np.empty((pairs, 2, space.N))
    x0[:, 0] = x.coeffs
    x0[:, 1] = x.coeffs + delta * d
    params = SimParams(dt=dt, T=T, seed=seed)
    obs = _GapObserver(params.steps, pairs)
    streams = np.repeat(np.arange(pairs), 2)
    traj = simulate(space, params, drift, noise, SpectralField(x0, space), measures=[obs],
                    record=False, streams=streams)
    return traj.times, obs.mean, obs.halfwidth


def feller_experiment(space: GalerkinSpace, drift: Polynomial, noise: NoiseSpec | None,
                      cert: DissipativityCertificate, x: SpectralField, deltas=(1e-2, 1e-1),
                      T: float = 2.0, dt: float = 1e-3, pairs: int = 1000, seed: int = 0,
                      scaling_times=(0.5, 1.0, 2.0)) -> FellerReport:
    """Coupled-pair test of mean-square continuity in the initial condition.

    For every ``delta`` the pair ``(x, x + delta e_1)`` is driven by identical
    increments; the mean-square gap is compared with
    ``delta^2 exp((2 (kappa - omega) + L^2) t)``.  The run at ``delta / 2``
    supplies the quadratic-scaling ratio at ``scaling_times``.
    """
    if any(d == 0 for d in deltas):
        raise UsageError("perturbation magnitudes must be nonzero")
    gaps, hws, env, env_p, scaling = {}, {}, {}, {}, {}
    times = None
    for d in deltas:
        times, g, hw = coupled_gap(space, drift, noise, x, d, T, dt, pairs, seed)
        gaps[d], hws[d] = g, hw
        env[d] = d**2 * np.exp(cert.feller_rate * times)
        env_p[d] = d**2 * np.exp(cert.feller_rate_literal * times)
        if scaling_times:
            _, g_half, _ = coupled_gap(space, drift, noise, x, d / 2, T, dt, pairs, seed)
            idx = [int(round(t / dt)) for t in scaling_times]
            scaling[d] = [float(g[i] / g_half[i]) for i in idx]
    return FellerReport(times, list(deltas), gaps, hws, env, env_p, scaling, tuple(scaling_times))


# invariance -------------------------------------------------------------------
def _pair_sum(sorted_x: np.ndarray) -> np.ndarray:
    """``sum_{i<j} |x_i - x_j|`` along the last axis of sorted data."""
    n = sorted_x.shape[-1]
    k = np.arange(1, n + 1)
    return sorted_x @ (2 * k - n - 1).astype(float)


def energy_distance(x, y) -> np.ndarray:
    """Unbiased U-statistic for ``2E|X-Y| - E|X-X'| - E|Y-Y'|`` (1-d samples).

    Leading axes are treated as independent problems.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, m = x.shape[-1], y.shape[-1]
    if n < 2 or m < 2:
        raise UsageError("energy distance needs at least two samples on each side")
    sxx = _pair_sum(np.sort(x, axis=-1))
    syy = _pair_sum(np.sort(y, axis=-1))
    spool = _pair_sum(np.sort(np.concatenate([x, y], axis=-1), axis=-1))
    sxy = spool - sxx - syy
    return 2 * sxy / (n * m) - 2 * sxx / (n * (n - 1)) - 2 * syy / (m * (m - 1))


def _observables(space: GalerkinSpace, coeffs: np.ndarray) -> np.ndarray:
    """Rows ``||u||_0, u_1, u_2`` for a batch of fields."""
    rows = [np.sqrt(space.norm_sq(coeffs)), coeffs[:, 0]]
    rows.append(coeffs[:, 1] if space.N > 1 else np.zeros(len(coeffs)))
    return np.stack(rows)


@dataclass
class InvarianceReport:
    distance: float
    per_observable: list
    threshold: float
    p_value: float
    samples: int

    @property
    def indistinguishable(self) -> bool:
        return self.distance <= self.threshold

    def to_dict(self) -> dict:
        return {"empirical": {"distance": self.distance, "per_observable": self.per_observable},
                "bounds": {"threshold_95": self.threshold},
                "verdict": "PASS" if self.indistinguishable else "FAIL",
                "confidence": {"p_value": self.p_value, "samples": self.samples}}


def invariance_distance(fields: SpectralField | OccupationMeasure, delta: float, drift: Polynomial,
                        noise: NoiseSpec | None, dt: float = 1e-3, seed: int = 0,
                        permutations: int = 199) -> InvarianceReport:
    """Energy distance between a sample and its image after time ``delta``.

    Each field is propagated with fresh noise; the statistic is the largest
    energy distance over ``||u||_0``, ``u_1``, ``u_2``, and the threshold is
    the 95% quantile of that statistic under label permutations.
    """
    if isinstance(fields, OccupationMeasure):
        fields = fields.reservoir_field()
    if fields.coeffs.ndim != 2 or fields.coeffs.shape[0] < 2:
        raise UsageError("need a non-empty reservoir of at least two fields")
    if not delta > 0:
        raise UsageError(f"propagation time must be positive, got {delta}")
    space = fields.space
    n = fields.coeffs.shape[0]
    params = SimParams(dt=dt, T=delta, seed=seed)
    out = simulate(space, params, drift, noise, fields, record=False, streams=np.arange(n),
                   purpose="propagate")
    before = _observables(space, fields.coeffs)
    after = _observables(space, out.final)
    per = energy_distance(before, after)
    stat = float(per.max())
    pooled = np.concatenate([before, after], axis=1)
    g = philox(seed, "permutation")
    null = np.empty(permutations)
    for i in range(permutations):
        perm = g.permutation(2 * n)
        null[i] = energy_distance(pooled[:, perm[:n]], pooled[:, perm[n:]]).max()
    thr = float(np.quantile(null, 0.95))
    pval = float((1 + np.sum(null >= stat)) / (permutations + 1))
    return InvarianceReport(stat, per.tolist(), thr, pval, n)


@dataclass
class InvarianceTrend:
    horizons: list
    reports: list

    @property
    def passed(self) -> bool:
        """Each distance stays below the previous one plus its own permutation band."""
        r = self.reports
        return all(r[i + 1].distance <= r[i].distance + r[i + 1].threshold for i in range(len(r) - 1))

    def to_dict(self) -> dict:
        return {"empirical": {"T": self.horizons, "distance": [r.distance for r in self.reports]},
                "bounds": {"threshold_95": [r.threshold for r in self.reports]},
                "verdict": "PASS" if self.passed else "FAIL",
                "confidence": {"p_value": [r.p_value for r in self.reports],
                               "samples": [r.samples for r in self.reports]}}


def invariance_trend(space: GalerkinSpace, drift: Polynomial, noise: NoiseSpec | None, x0: SpectralField,
                     horizons=(100.0, 400.0, 1600.0), delta: float = 0.5, dt: float = 2e-3,
                     capacity: int = 400, reservoir_stride: int = 50, seed: int = 0,
                     permutations: int = 199) -> InvarianceTrend:
    """Invariance distance of ``mu_T`` for growing ``T`` from a single run.

    Every horizon has its own occupation measure (window ``(0, T]``) fed by
    the same trajectory, so the run is only simulated once.
    """
    horizons = sorted(float(h) for h in horizons)
    measures = [OccupationMeasure(space, h, 0.0, capacity=capacity, reservoir_stride=reservoir_stride,
                                  seed=seed, stream=i) for i, h in enumerate(horizons)]
    simulate(space, SimParams(dt=dt, T=horizons[-1], seed=seed), drift, noise, x0,
             measures=measures, record=False)
    reports = [invariance_distance(m, delta, drift, noise, dt=dt, seed=seed + 1 + i,
                                   permutations=permutations)
               for i, m in enumerate(measures)]
    return InvarianceTrend(horizons, reports)
