"""Exponential Euler time stepping of the mild formulation.

One step of size ``dt`` for mode ``n``::

    u+ = e^{l dt} u + (e^{l dt} - 1) / l * F(u) + e^{l dt} (B(u) dW)

with ``l = lambda_n`` and drift/noise frozen at the left endpoint.  The
linear part is exact, so stiff high modes are handled without a step-size
restriction.

Ensembles are simulated as a leading batch axis; trajectory ``r`` of a batch
draws its increments from stream ``stream + r`` unless streams are given.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .drift import Polynomial, evaluate_f
from .errors import BlowUpError, ConfigError, UsageError
from .noise import NoiseSpec, WienerIncrement
from .rng import BLOCK, NormalStream, philox, stream_rows
from .spectral import GalerkinSpace, SpectralField

SNAPSHOT_MAGIC = b"SPDE1"


@dataclass(frozen=True)
class SimParams:
    dt: float
    T: float
    seed: int = 0
    stream: int = 0
    snapshot_stride: int = 1
    burn_in: float = 0.0

    def __post_init__(self):
        if not self.dt > 0:
            raise UsageError(f"dt must be positive, got {self.dt}")
        if self.T < self.dt:
            raise UsageError(f"horizon T={self.T} shorter than dt={self.dt}")
        if not self.burn_in < self.T:
            raise UsageError(f"burn_in={self.burn_in} must be below T={self.T}")
        if self.snapshot_stride < 1:
            raise UsageError("snapshot_stride must be >= 1")

    @property
    def steps(self) -> int:
        n = round(self.T / self.dt)
        if abs(n * self.dt - self.T) > 1e-9 * self.T:
            raise UsageError(f"T={self.T} is not a multiple of dt={self.dt}")
        return n


class Stepper:
    """Precomputed exponential Euler weights for one (space, dt) pair."""

    def __init__(self, space: GalerkinSpace, dt: float, drift: Polynomial, noise: NoiseSpec | None):
        if not space.supports_degree(drift.degree):
            raise ConfigError(
                f"grid M={space.M} aliases degree-{drift.degree} drift; need M >= "
                f"{space.min_grid(space.N, drift.degree)}"
            )
        self.space = space
        self.dt = dt
        self.drift = drift
        self.noise = None if noise is None or noise.is_zero else noise
        lam = space.lambdas
        self.decay = np.exp(lam * dt)
        self.phi = np.expm1(lam * dt) / lam
        self._needs_grid = not drift.is_zero or (
            self.noise is not None and self.noise.kind == "nemytskii"
        )

    def step(self, c: np.ndarray, dW: np.ndarray | None, frozen: np.ndarray | None = None) -> np.ndarray:
        """Advance raw coefficients ``c`` by one step.

        ``frozen`` replaces the state at which ``B`` is evaluated (the Picard
        map freezes the diffusion along a given path).
        """
        space = self.space
        grid = space.coeffs_to_grid(c) if self._needs_grid else None
        out = self.decay * c
        if not self.drift.is_zero:
            out = out + self.phi * space.grid_to_coeffs(evaluate_f(self.drift, grid))
        if self.noise is not None and dW is not None:
            if frozen is None:
                inc = self.noise.increment(space, c, grid, dW)
            else:
                inc = self.noise.increment(space, frozen, None, dW)
            out = out + self.decay * inc
        return out


def step_exp_euler(u: SpectralField, dt: float, drift: Polynomial, noise: NoiseSpec | None = None,
                   rng=None) -> SpectralField:
    """One exponential Euler step.

    ``rng`` is either a ``WienerIncrement``, a raw increment array, a
    ``(seed, stream, step)`` triple, or ``None`` for a noise-free step.
    """
    if not dt > 0:
        raise UsageError(f"dt must be positive, got {dt}")
    space = u.space
    if rng is None:
        dW = None
    elif isinstance(rng, WienerIncrement):
        dW = rng.dW
    elif isinstance(rng, tuple):
        seed, stream, step = rng
        dW = NormalStream(seed, stream, space.N).rows(step, 1)[0] * math.sqrt(dt)
    else:
        dW = np.asarray(rng, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        out = Stepper(space, dt, drift, noise).step(u.coeffs, dW)
    if not np.all(np.isfinite(out)):
        raise BlowUpError(1, u.coeffs)
    return SpectralField(out, space)


@dataclass(frozen=True)
class WienerPath:
    """Pre-drawn increments, shape ``(steps, *batch, N)``."""

    dW: np.ndarray
    dt: float

    @property
    def steps(self) -> int:
        return self.dW.shape[0]


def wiener_path(space: GalerkinSpace, params: SimParams, streams, purpose: str = "path") -> WienerPath:
    streams = list(streams)
    z = stream_rows(params.seed, streams, space.N, 0, params.steps, purpose)
    return WienerPath(z * math.sqrt(params.dt), params.dt)


@dataclass
class Trajectory:
    """Per-step observables and every ``stride``-th state of a (batch of) run(s).

    Observable arrays have shape ``(steps + 1, *batch)``; ``modes`` carries an
    extra trailing axis with the first few coefficients.
    """

    space: GalerkinSpace
    params: SimParams
    times: np.ndarray
    norm0: np.ndarray
    norm_gamma: np.ndarray
    modes: np.ndarray
    snapshot_times: np.ndarray
    snapshots: np.ndarray
    final: np.ndarray
    path: np.ndarray | None = field(default=None, repr=False)

    @property
    def batch_shape(self) -> tuple:
        return self.final.shape[:-1]

    def final_field(self) -> SpectralField:
        return SpectralField(self.final, self.space)

    def to_csv(self, path, member: int | None = None) -> None:
        """Write ``t,norm0,norm_gamma,mode_1..mode_K`` for one trajectory."""
        norm0, normg, modes = self.norm0, self.norm_gamma, self.modes
        if self.batch_shape:
            idx = np.unravel_index(member or 0, self.batch_shape)
            norm0 = norm0[(slice(None), *idx)]
            normg = normg[(slice(None), *idx)]
            modes = modes[(slice(None), *idx)]
        K = modes.shape[-1]
        header = ["t", "norm0", "norm_gamma"] + [f"mode_{k}" for k in range(1, K + 1)]
        lines = [",".join(header)]
        for i, t in enumerate(self.times):
            row = [t, norm0[i], normg[i], *modes[i]]
            lines.append(",".join(format(float(x), ".17g") for x in row))
        Path(path).write_text("\n".join(lines) + "\n")

    def write_snapshots(self, path, member: int | None = None) -> None:
        snaps = self.snapshots
        if self.batch_shape:
            idx = np.unravel_index(member or 0, self.batch_shape)
            snaps = snaps[(slice(None), *idx)]
        write_snapshots(path, self.space, self.snapshot_times, snaps)


def write_snapshots(path, space: GalerkinSpace, times, coeffs) -> None:
    """Binary container: magic, ``N, M`` (int32), ``L, gamma`` (float64),
    then one record ``t, c_1..c_N`` (float64, little endian) per snapshot."""
    times = np.asarray(times, dtype="<f8")
    coeffs = np.asarray(coeffs, dtype="<f8").reshape(len(times), space.N)
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<iidd", space.N, space.M, space.L, space.gamma))
        fh.write(np.column_stack([times, coeffs]).astype("<f8").tobytes())


def read_snapshots(path):
    """Inverse of ``write_snapshots``: returns ``(header, times, coeffs)``."""
    raw = Path(path).read_bytes()
    if raw[:5] != SNAPSHOT_MAGIC:
        raise UsageError(f"{path}: not a snapshot container")
    N, M, L, gamma = struct.unpack_from("<iidd", raw, 5)
    body = np.frombuffer(raw, dtype="<f8", offset=5 + struct.calcsize("<iidd"))
    rec = body.reshape(-1, N + 1)
    return {"N": N, "M": M, "L": L, "gamma": gamma}, rec[:, 0].copy(), rec[:, 1:].copy()


def simulate(space: GalerkinSpace, params: SimParams, drift: Polynomial, noise: NoiseSpec | None,
             x0: SpectralField, *, measures=(), record: bool = True, keep_path: bool = False,
             record_modes: int = 4, streams=None, path: WienerPath | None = None,
             purpose: str = "path") -> Trajectory:
    """Iterate the exponential Euler step from ``x0`` up to ``params.T``.

    ``x0`` may be a batch of fields.  ``measures`` are occupation-measure
    accumulators fed chunk by chunk, which keeps long runs out of memory when
    ``record`` is off.  Given ``path``, its increments are used instead of
    the counter-based streams.
    """
    if x0.space != space:
        raise UsageError("initial field lives on a different space")
    stepper = Stepper(space, params.dt, drift, noise)
    batch = x0.coeffs.shape[:-1]
    R = int(np.prod(batch, dtype=int))
    state = x0.coeffs.reshape(R, space.N).copy()
    n_steps = params.steps
    if streams is None:
        streams = params.stream + np.arange(R)
    streams = [int(s) for s in np.ravel(streams)]
    if len(streams) != R:
        raise UsageError("one stream id per trajectory is required")
    if path is not None:
        if path.steps != n_steps or path.dW.shape[1:-1] != batch:
            raise UsageError("Wiener path does not match the time grid or batch")
        frozen_dW = path.dW.reshape(n_steps, R, space.N)
    noisy = stepper.noise is not None
    sqdt = math.sqrt(params.dt)
    K = min(record_modes, space.N)
    stride = params.snapshot_stride
    g = space.gamma
    w_g = space.weights(g)

    if record:
        norm0 = np.empty((n_steps + 1, R))
        normg = np.empty((n_steps + 1, R))
        modes = np.empty((n_steps + 1, R, K))
    snap_idx = np.arange(0, n_steps + 1, stride)
    snaps = np.empty((len(snap_idx), R, space.N))
    full = np.empty((n_steps + 1, R, space.N)) if keep_path else None

    def consume(k0, buf):
        # buf holds the states at steps k0 .. k0 + len(buf) - 1
        ks = np.arange(k0, k0 + len(buf))
        if record:
            norm0[ks] = np.sqrt(np.einsum("krn,krn->kr", buf, buf))
            normg[ks] = np.sqrt((buf**2) @ w_g)
            modes[ks] = buf[..., :K]
        sel = ks % stride == 0
        if np.any(sel):
            snaps[ks[sel] // stride] = buf[sel]
        if keep_path:
            full[ks] = buf
        for m in measures:
            m.observe(ks, ks * params.dt, buf)

    consume(0, state[None])
    k = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while k < n_steps:
            count = min(BLOCK - k % BLOCK, n_steps - k)
            if not noisy:
                dW = None
            elif path is not None:
                dW = frozen_dW[k:k + count]
            else:
                dW = stream_rows(params.seed, streams, space.N, k, count, purpose) * sqdt
            buf = np.empty((count, R, space.N))
            for j in range(count):
                state = stepper.step(state, None if dW is None else dW[j])
                buf[j] = state
            if not np.all(np.isfinite(buf)):
                bad = int(np.argmax(~np.all(np.isfinite(buf), axis=(1, 2))))
                last = buf[bad - 1] if bad > 0 else (full[k] if keep_path else None)
                raise BlowUpError(k + bad + 1, last)
            consume(k + 1, buf)
            k += count

    shape = lambda a, *tail: a.reshape(a.shape[0], *batch, *tail)
    times = np.arange(n_steps + 1) * params.dt
    if record:
        traj_norm0, traj_normg, traj_modes = shape(norm0), shape(normg), shape(modes, K)
    else:
        traj_norm0 = traj_normg = np.empty((0, *batch))
        traj_modes = np.empty((0, *batch, K))
    return Trajectory(
        space=space, params=params, times=times,
        norm0=traj_norm0, norm_gamma=traj_normg, modes=traj_modes,
        snapshot_times=snap_idx * params.dt, snapshots=shape(snaps, space.N),
        final=state.reshape(*batch, space.N),
        path=shape(full, space.N) if keep_path else None,
    )


def picard_map(v: Trajectory, x0: SpectralField, drift: Polynomial, noise: NoiseSpec,
               path: WienerPath) -> Trajectory:
    """Solve ``dz = (Az + F(z))dt + B(v)dW`` along the frozen path ``v``.

    Uses the increments of ``path``, so running it on a trajectory generated
    from the same increments returns that trajectory.
    """
    if v.path is None:
        raise UsageError("picard_map needs the full path of v (simulate with keep_path=True)")
    n_steps = v.path.shape[0] - 1
    if path.steps != n_steps or not math.isclose(path.dt, v.params.dt):
        raise UsageError("Wiener path and v do not share a time grid")
    space = v.space
    stepper = Stepper(space, v.params.dt, drift, noise)
    batch = v.batch_shape
    z = np.broadcast_to(x0.coeffs, (*batch, space.N)).copy()
    out = np.empty_like(v.path)
    out[0] = z
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            z = stepper.step(z, path.dW[k], frozen=v.path[k])
            out[k + 1] = z
    if not np.all(np.isfinite(out)):
        raise BlowUpError(int(np.argmax(~np.isfinite(out).reshape(n_steps + 1, -1).all(1))), None)
    norm0 = np.sqrt(np.einsum("...n,...n->...", out, out))
    normg = np.sqrt((out**2) @ space.weights(space.gamma))
    K = v.modes.shape[-1] if v.modes.size else min(4, space.N)
    return Trajectory(space=space, params=v.params, times=v.times, norm0=norm0, norm_gamma=normg,
                      modes=out[..., :K], snapshot_times=v.times, snapshots=out, final=out[-1],
                      path=out)


def _bootstrap(num: np.ndarray, den: np.ndarray, seed: int, resamples: int = 2000):
    """Bootstrap draws of ``mean(num[:, j]) / mean(den[:, j])`` (pairs resampled jointly)."""
    g = philox(seed, "bootstrap")
    n = num.shape[0]
    idx = g.integers(0, n, size=(resamples, n))
    return num[idx].mean(axis=1) / den[idx].mean(axis=1)


@dataclass
class ContractionReport:
    horizons: list
    ratios: list
    ci_low: list
    ci_high: list
    p: float
    pairs: int
    trend_upper: float  # 97.5% bootstrap quantile of ratio(T_min) - ratio(T_max)

    @property
    def contraction_at_min(self) -> bool:
        return self.ci_high[0] < 1.0

    @property
    def decreasing(self) -> bool:
        return self.trend_upper < 0.0

    def to_dict(self) -> dict:
        return {
            "empirical": {"T": self.horizons, "ratio": self.ratios},
            "confidence": {"ratio_low": self.ci_low, "ratio_high": self.ci_high,
                           "trend_upper": self.trend_upper, "level": 0.95},
            "bounds": {"ratio_below": 1.0},
            "verdict": "PASS" if self.contraction_at_min and self.decreasing else "FAIL",
            "p": self.p, "pairs": self.pairs,
        }


def contraction_experiment(space: GalerkinSpace, drift: Polynomial, noise: NoiseSpec, x0: SpectralField,
                           horizons=(0.05, 0.2), pairs: int = 1000, p: float = 6.0, dt: float = 1e-3,
                           seed: int = 0) -> ContractionReport:
    """Monte-Carlo ratio ``E sup|Lv1 - Lv2|^p / E sup|v1 - v2|^p`` per horizon.

    ``v1`` and ``v2`` are independent solutions started at ``x0``; both are
    pushed through the Picard map with one common Wiener path.  All horizons
    reuse the same paths (sup over the prefix ``t <= T``).
    """
    if p <= 4:
        raise UsageError(f"the contraction estimate needs p > 4, got {p}")
    horizons = sorted(float(t) for t in horizons)
    T = horizons[-1]
    params = SimParams(dt=dt, T=T, seed=seed)
    x = SpectralField(np.broadcast_to(x0.coeffs, (pairs, 2, space.N)).copy(), space)
    v = simulate(space, params, drift, noise, x, record=False, keep_path=True)
    W = wiener_path(space, params, range(pairs), purpose="picard")
    W2 = WienerPath(np.repeat(W.dW[:, :, None, :], 2, axis=2), dt)
    z = picard_map(v, x0, drift, noise, W2)

    dv = np.sqrt(space.norm_sq(v.path[:, :, 0] - v.path[:, :, 1]))
    dz = np.sqrt(space.norm_sq(z.path[:, :, 0] - z.path[:, :, 1]))
    num, den = [], []
    for h in horizons:
        kmax = round(h / dt)
        num.append(dz[: kmax + 1].max(axis=0) ** p)
        den.append(dv[: kmax + 1].max(axis=0) ** p)
    num = np.stack(num, axis=1)
    den = np.stack(den, axis=1)
    if np.any(den.mean(axis=0) == 0):
        raise UsageError("v1 and v2 coincide; the ratio is undefined")
    ratios = num.mean(axis=0) / den.mean(axis=0)
    boot = _bootstrap(num, den, seed)
    lo, hi = np.quantile(boot, [0.025, 0.975], axis=0)
    trend = float(np.quantile(boot[:, 0] - boot[:, -1], 0.975))
    return ContractionReport(horizons, ratios.tolist(), lo.tolist(), hi.tolist(), p, pairs, trend)


@dataclass
class ConvolutionReport:
    horizons: list
    estimates: list
    ratios: list
    coarse_estimates: list
    gamma: float
    p: float
    paths: int
    hs_norm: float

    @property
    def refinement_ok(self) -> bool:
        return all(
            abs(f - c) <= 0.1 * abs(f) for f, c in zip(self.estimates, self.coarse_estimates)
        )

    @property
    def decreasing(self) -> bool:
        # horizons are sorted ascending, so ratios must be strictly increasing
        return all(a < b for a, b in zip(self.ratios, self.ratios[1:]))

    def to_dict(self) -> dict:
        return {
            "empirical": {"T": self.horizons, "estimate": self.estimates, "ratio": self.ratios,
                          "coarse_estimate": self.coarse_estimates},
            "bounds": {"hs_norm": self.hs_norm},
            "confidence": {"refinement_tolerance": 0.1, "refinement_ok": self.refinement_ok},
            "verdict": "PASS" if self.decreasing and self.refinement_ok else "FAIL",
            "gamma": self.gamma, "p": self.p, "paths": self.paths,
        }


def _ou_paths(space: GalerkinSpace, weights, steps: int, dt: float, paths: int, seed: int) -> np.ndarray:
    """Exact-in-law samples of the stochastic convolution, shape ``(steps+1, paths, N)``."""
    lam = space.lambdas
    a = np.exp(lam * dt)
    s = np.abs(weights) * np.sqrt(-np.expm1(2 * lam * dt) / (2 * np.abs(lam)))
    out = np.zeros((steps + 1, paths, space.N))
    x = np.zeros((paths, space.N))
    for k0 in range(0, steps, BLOCK):
        count = min(BLOCK, steps - k0)
        z = stream_rows(seed, range(paths), space.N, k0, count, purpose="sample")
        for j in range(count):
            x = a * x + s * z[j]
            out[k0 + j + 1] = x
    return out


def convolution_experiment(space: GalerkinSpace, weights, horizons=(0.05, 0.1, 0.2, 0.4),
                           gamma: float | None = None, p: float = 6.0, paths: int = 1000,
                           dt: float = 1e-3, seed: int = 0) -> ConvolutionReport:
    """Estimate ``E sup_{t<=T} ||int_0^t e^{(t-s)A} eta dW||_gamma^p`` per horizon.

    ``eta`` is the constant diagonal operator with entries ``weights``.  Paths
    are generated on a grid of ``dt / 2``; the estimate restricted to the
    even grid points is the ``dt`` estimate, used for the refinement check.
    """
    if p <= 2:
        raise UsageError(f"the convolution estimate needs p > 2, got {p}")
    gamma = space.gamma if gamma is None else gamma
    if not 0.25 < gamma < 0.5:
        raise UsageError(f"gamma must lie in (1/4, 1/2), got {gamma}")
    weights = np.asarray(weights, dtype=float)
    horizons = sorted(float(t) for t in horizons)
    fine = dt / 2
    steps = round(horizons[-1] / fine)
    X = _ou_paths(space, weights, steps, fine, paths, seed)
    ng = np.sqrt((X**2) @ space.weights(gamma))
    hs = float(np.sqrt(np.sum(weights**2)))
    est, coarse, ratios = [], [], []
    for h in horizons:
        kmax = round(h / fine)
        est.append(float(np.mean(ng[: kmax + 1].max(axis=0) ** p)))
        coarse.append(float(np.mean(ng[: kmax + 1: 2].max(axis=0) ** p)))
        ratios.append(est[-1] / (h * hs**p) if hs > 0 else 0.0)
    return ConvolutionReport(horizons, est, ratios, coarse, gamma, p, paths, hs)


def convolution_mean_square(space: GalerkinSpace, weights, T: float, dt: float = 1e-3,
                            paths: int = 100_000, seed: int = 0) -> tuple[float, float]:
    """``(Monte-Carlo, closed form)`` for ``E||int_0^T e^{(T-s)A} eta dW||_0^2``."""
    weights = np.asarray(weights, dtype=float)
    steps = round(T / dt)
    active = weights != 0
    lam = space.lambdas[active]
    q = weights[active]
    # only the terminal value is needed: chain the exact one-step updates
    a = np.exp(lam * dt)
    s = np.abs(q) * np.sqrt(-np.expm1(2 * lam * dt) / (2 * np.abs(lam)))
    x = np.zeros((paths, q.size))
    g = philox(seed, "sample", 0)
    for _ in range(steps):
        x = a * x + s * g.standard_normal((paths, q.size))
    mc = float(np.mean(np.sum(x**2, axis=-1)))
    exact = float(np.sum(q**2 * -np.expm1(2 * lam * T) / (2 * np.abs(lam))))
    return mc, exact
