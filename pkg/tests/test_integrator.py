import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from spde_lab.drift import OddPolynomial, Polynomial, evaluate_f
from spde_lab.errors import BlowUpError, ConfigError, UsageError
from spde_lab.integrator import (
    SNAPSHOT_MAGIC,
    SimParams,
    WienerPath,
    contraction_experiment,
    convolution_experiment,
    convolution_mean_square,
    picard_map,
    read_snapshots,
    simulate,
    step_exp_euler,
    wiener_path,
)
from spde_lab.noise import NoiseSpec
from spde_lab.spectral import GalerkinSpace, semigroup_apply

ZERO = Polynomial([])
CUBIC = OddPolynomial([1.0, 0.0, -1.0])


def ou_noise(space, q0=1.0):
    return NoiseSpec.from_decay(space, "additive", q0, 1.0)


def batch(space, coeffs, R):
    return space.field(np.broadcast_to(np.asarray(coeffs, float), (R, space.N)).copy())


class TestParams:
    @pytest.mark.parametrize("kw", [dict(dt=0, T=1), dict(dt=0.1, T=0.05), dict(dt=0.1, T=1, burn_in=1),
                                    dict(dt=0.1, T=1, snapshot_stride=0)])
    def test_invalid(self, kw):
        with pytest.raises(UsageError):
            SimParams(**kw)

    def test_steps(self):
        assert SimParams(0.01, 1.0).steps == 100
        with pytest.raises(UsageError):
            SimParams(0.3, 1.0).steps


class TestStep:
    def test_pure_semigroup(self, space_pi):
        dt = 0.01
        out = step_exp_euler(space_pi.unit(1), dt, ZERO)
        assert out.coeffs == pytest.approx(np.r_[math.exp(-dt), np.zeros(15)], rel=1e-15)

    def test_linear_exactness(self, space_pi, rng):
        u = space_pi.field(rng.standard_normal(16))
        assert np.array_equal(step_exp_euler(u, 0.03, ZERO).coeffs, semigroup_apply(u, 0.03).coeffs)

    def test_rejects_bad_dt(self, space_pi):
        with pytest.raises(UsageError):
            step_exp_euler(space_pi.unit(1), 0.0, ZERO)

    def test_small_dt_matches_explicit_euler(self, space_unit):
        # one exponential step differs from one explicit Euler step by O(dt^2)
        sp = space_unit
        u = sp.field(np.r_[0.5, 0.2, np.zeros(14)])
        Fu = sp.grid_to_coeffs(evaluate_f(CUBIC, sp.coeffs_to_grid(u.coeffs)))
        dts = np.array([1e-4, 1e-5, 1e-6])
        diffs = []
        for dt in dts:
            exp_step = step_exp_euler(u, dt, CUBIC).coeffs
            euler = u.coeffs + dt * (sp.lambdas * u.coeffs + Fu)
            diffs.append(np.linalg.norm(exp_step - euler))
        diffs = np.array(diffs)
        C = np.max(diffs / dts**2)
        assert np.all(diffs <= C * dts**2 * (1 + 1e-12))
        # the fitted constant is stable across three decades
        ratio = diffs / dts**2
        assert ratio.max() / ratio.min() < 1.01

    def test_rng_forms_agree(self, space_unit, allen_cahn):
        sp, f, noise, _ = allen_cahn
        u = sp.unit(1) * 0.3
        from spde_lab.noise import wiener_increment
        inc = wiener_increment(sp, 0.01, (4, 2, 9))
        a = step_exp_euler(u, 0.01, f, noise, (4, 2, 9)).coeffs
        b = step_exp_euler(u, 0.01, f, noise, inc).coeffs
        c = step_exp_euler(u, 0.01, f, noise, inc.dW).coeffs
        assert np.array_equal(a, b) and np.array_equal(b, c)

    def test_aliasing_rejected(self):
        sp = GalerkinSpace(1.0, 8, M=32)
        with pytest.raises(ConfigError):
            step_exp_euler(sp.unit(1), 0.01, CUBIC)


@pytest.mark.slow
def test_deterministic_run_matches_ode_reference(space_unit):
    """Noise-free cubic run against a tight implicit ODE solve of the same Galerkin system.

    The scheme is first order with error ~4.2 dt here, so dt = 2e-7 is needed for
    the 1e-6 relative target.
    """
    sp = space_unit
    x0 = sp.unit(1) * 0.5

    def rhs(t, c):
        return sp.lambdas * c + sp.grid_to_coeffs(evaluate_f(CUBIC, sp.coeffs_to_grid(c)))

    ref = solve_ivp(rhs, (0.0, 1.0), x0.coeffs, method="Radau", rtol=1e-13, atol=1e-16).y[:, -1]
    out = simulate(sp, SimParams(2e-7, 1.0), CUBIC, None, x0, record=False).final
    rel = np.linalg.norm(out - ref) / np.linalg.norm(ref)
    assert rel <= 1e-6


class TestSimulate:
    def test_noise_free_linear_decay(self, space_pi, rng):
        x0 = space_pi.field(rng.standard_normal(16))
        tr = simulate(space_pi, SimParams(0.01, 1.0), ZERO, None, x0)
        assert tr.final == pytest.approx(x0.coeffs * np.exp(space_pi.lambdas * 1.0), rel=1e-12)
        assert tr.norm0[-1] <= math.exp(-space_pi.omega) * tr.norm0[0] * (1 + 1e-12)

    def test_observables_and_snapshots(self, space_pi, rng):
        x0 = space_pi.field(rng.standard_normal(16))
        tr = simulate(space_pi, SimParams(0.01, 1.0, snapshot_stride=10), ZERO, ou_noise(space_pi), x0)
        assert tr.times.shape == (101,)
        assert tr.snapshot_times == pytest.approx(np.arange(11) * 0.1)
        assert tr.snapshots[-1] == pytest.approx(tr.final)
        assert tr.norm0[-1] == pytest.approx(np.linalg.norm(tr.final))
        assert tr.norm_gamma[-1] == pytest.approx(math.sqrt(space_pi.norm_sq(tr.final, space_pi.gamma)))

    def test_replay_bit_identical(self, allen_cahn):
        sp, f, noise, _ = allen_cahn
        p = SimParams(2e-3, 0.5, seed=9, stream=3)
        a = simulate(sp, p, f, noise, sp.unit(1) * 0.5)
        b = simulate(sp, p, f, noise, sp.unit(1) * 0.5)
        assert a.final.tobytes() == b.final.tobytes()
        assert a.norm0.tobytes() == b.norm0.tobytes()

    def test_batch_matches_single_streams(self, allen_cahn):
        sp, f, noise, _ = allen_cahn
        p = SimParams(2e-3, 0.6, seed=2)
        many = simulate(sp, p, f, noise, batch(sp, sp.unit(1).coeffs * 0.5, 3), record=False)
        one = simulate(sp, SimParams(2e-3, 0.6, seed=2, stream=2), f, noise, sp.unit(1) * 0.5,
                       record=False)
        # same increments; batched matmuls may reassociate sums in the last bits
        assert np.allclose(many.final[2], one.final, rtol=1e-12, atol=1e-15)

    def test_ou_transient_variance(self, space_pi):
        noise = ou_noise(space_pi)
        T = 1.0
        tr = simulate(space_pi, SimParams(1e-3, T, seed=1), ZERO, noise, space_pi.zeros(1000),
                      record=False)
        lam = space_pi.lambdas
        exact = noise.weights**2 * -np.expm1(2 * lam * T) / (2 * np.abs(lam))
        var = tr.final.var(axis=0)
        assert np.all(np.abs(var[:4] / exact[:4] - 1) <= 0.10)
        # the scheme's own transient variance, a^2 q^2 dt (1 - a^2K) / (1 - a^2), differs from
        # the exact one by about |lambda_n| dt; every mode must match it to four standard errors
        a2, K = np.exp(2 * lam * 1e-3), 1000
        scheme = a2 * noise.weights**2 * 1e-3 * (1 - a2**K) / (1 - a2)
        assert np.all(np.abs(var / scheme - 1) <= 4 * math.sqrt(2 / 1000))

    def test_weak_refinement(self, space_pi):
        # halving dt reduces the stationary-variance bias of the stiff modes
        noise = ou_noise(space_pi)
        lam = space_pi.lambdas
        exact = noise.weights**2 / (2 * np.abs(lam))
        errs = []
        for dt in (0.02, 0.01):
            tr = simulate(space_pi, SimParams(dt, 1.0, seed=5), ZERO, noise, space_pi.zeros(4000),
                          record=False)
            errs.append(np.abs(tr.final.var(axis=0) / exact - 1))
        assert np.all(errs[1][4:] < errs[0][4:])

    def test_blow_up(self):
        sp = GalerkinSpace(1.0, 4, max_degree=3)
        with pytest.raises(BlowUpError) as exc:
            simulate(sp, SimParams(0.01, 1.0), Polynomial([0.0, 0.0, 50.0]), None, sp.unit(1) * 50.0)
        assert exc.value.step >= 1
        assert exc.value.last_state is None or np.all(np.isfinite(exc.value.last_state))

    def test_csv_and_snapshots(self, space_pi, tmp_path):
        tr = simulate(space_pi, SimParams(0.01, 1.0, snapshot_stride=10), ZERO, ou_noise(space_pi),
                      space_pi.unit(1))
        tr.to_csv(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "t,norm0,norm_gamma,mode_1,mode_2,mode_3,mode_4"
        assert len(lines) == 102
        tr.write_snapshots(tmp_path / "s.bin")
        raw = (tmp_path / "s.bin").read_bytes()
        assert raw[:5] == SNAPSHOT_MAGIC
        head, times, coeffs = read_snapshots(tmp_path / "s.bin")
        assert head == {"N": 16, "M": space_pi.M, "L": math.pi, "gamma": 0.3}
        assert np.array_equal(times, tr.snapshot_times)
        assert np.array_equal(coeffs, tr.snapshots)


class TestPicard:
    def test_fixed_point(self, allen_cahn):
        sp, f, noise, _ = allen_cahn
        p = SimParams(2e-3, 0.2, seed=4)
        x0 = batch(sp, sp.unit(1).coeffs * 0.5, 3)
        v = simulate(sp, p, f, noise, x0, keep_path=True, record=False)
        z = picard_map(v, sp.unit(1) * 0.5, f, noise, wiener_path(sp, p, range(3)))
        assert np.max(np.abs(z.path - v.path)) <= 1e-8

    def test_additive_independent_of_v(self, space_pi):
        noise = ou_noise(space_pi)
        p = SimParams(1e-2, 0.5)
        x = space_pi.unit(1)
        v1 = simulate(space_pi, p, ZERO, noise, x, keep_path=True, record=False)
        v2 = simulate(space_pi, SimParams(1e-2, 0.5, seed=8), ZERO, noise, x * 2.0, keep_path=True,
                      record=False)
        W = wiener_path(space_pi, SimParams(1e-2, 0.5, seed=3), [0])
        W1 = WienerPath(W.dW[:, 0], W.dt)
        assert np.array_equal(picard_map(v1, x, ZERO, noise, W1).path,
                              picard_map(v2, x, ZERO, noise, W1).path)

    def test_ou_recursion(self, space_pi):
        noise = ou_noise(space_pi)
        dt, T = 1e-2, 0.3
        x = space_pi.unit(2)
        v = simulate(space_pi, SimParams(dt, T), ZERO, noise, x, keep_path=True, record=False)
        W = wiener_path(space_pi, SimParams(dt, T, seed=1), [0])
        W1 = WienerPath(W.dW[:, 0], dt)
        z = picard_map(v, x, ZERO, noise, W1).path
        a = np.exp(space_pi.lambdas * dt)
        ref = x.coeffs.copy()
        for k in range(W1.steps):
            ref = a * ref + a * noise.weights * W1.dW[k]
            assert z[k + 1] == pytest.approx(ref, abs=1e-14)

    def test_grid_mismatch(self, space_pi):
        p = SimParams(1e-2, 0.3)
        v = simulate(space_pi, p, ZERO, None, space_pi.unit(1), keep_path=True)
        W = wiener_path(space_pi, SimParams(1e-2, 0.2), [0])
        with pytest.raises(UsageError):
            picard_map(v, space_pi.unit(1), ZERO, None, WienerPath(W.dW[:, 0], 1e-2))


class TestContraction:
    def test_additive_ratio_zero(self, space_pi):
        rep = contraction_experiment(space_pi, ZERO, ou_noise(space_pi), space_pi.unit(1),
                                     horizons=(0.05, 0.1), pairs=50, dt=1e-2)
        assert rep.ratios == [0.0, 0.0]

    def test_p_precondition(self, allen_cahn):
        sp, f, noise, _ = allen_cahn
        with pytest.raises(UsageError):
            contraction_experiment(sp, f, noise, sp.unit(1), p=4.0)

    def test_identical_paths_rejected(self, space_pi):
        with pytest.raises(UsageError):
            contraction_experiment(space_pi, ZERO, None, space_pi.unit(1), horizons=(0.05,),
                                   pairs=4, dt=1e-2)


class TestConvolution:
    def test_zero_eta(self, space_pi):
        rep = convolution_experiment(space_pi, np.zeros(16), paths=20, dt=1e-2,
                                     horizons=(0.1, 0.2))
        assert rep.estimates == [0.0, 0.0]

    def test_single_mode_ito_isometry(self, space_pi):
        mc, exact = convolution_mean_square(space_pi, np.eye(16)[0], T=1.0, dt=1e-3, paths=100_000)
        assert exact == pytest.approx((1 - math.exp(-2.0)) / 2, rel=1e-14)
        assert mc == pytest.approx(exact, rel=0.05)

    def test_preconditions(self, space_pi):
        with pytest.raises(UsageError):
            convolution_experiment(space_pi, np.ones(16), p=2.0)
        with pytest.raises(UsageError):
            convolution_experiment(space_pi, np.ones(16), gamma=0.5)
