import math

import numpy as np
import pytest

from spde_lab.drift import random_fields
from spde_lab.errors import ConfigError, UsageError
from spde_lab.noise import (
    NoiseSpec,
    Sigma,
    WienerIncrement,
    apply_B,
    check_growth,
    check_lipschitz,
    d_constant,
    hs_distance,
    hs_norm,
    lipschitz_bound,
    wiener_increment,
)
from spde_lab.rng import BLOCK, NormalStream, philox, stream_rows
from spde_lab.spectral import GalerkinSpace

IDENTITY = Sigma("clipped-linear", {"offset": 0.0, "slope": 1.0, "clip": 1e6})


def unit_weights(N, k=0):
    w = np.zeros(N)
    w[k] = 1.0
    return w


class TestSigma:
    def test_profiles(self):
        t = np.array([-2.0, 0.0, 0.5])
        assert Sigma("const", {"value": 2.0})(t) == pytest.approx([2, 2, 2])
        assert Sigma("sin", {"offset": 1.0, "amplitude": 0.5})(t) == pytest.approx(1 + 0.5 * np.sin(t))
        clip = Sigma("clipped-linear", {"offset": 1.0, "slope": 2.0, "clip": 1.0})
        assert clip(t) == pytest.approx([-1.0, 1.0, 2.0])
        assert clip.lip == 2.0 and clip.at_zero == 1.0

    def test_declared_lip(self):
        assert Sigma("sin", {"amplitude": 0.5}, 0.7).lip == 0.7
        with pytest.raises(ConfigError):
            Sigma("sin", {"amplitude": 0.5}, 0.1)
        with pytest.raises(ConfigError):
            Sigma("cosh")


class TestSpec:
    def test_cylindrical_multiplicative_rejected(self, space_pi):
        with pytest.raises(ConfigError):
            NoiseSpec.from_decay(space_pi, "nemytskii", 1.0, 0.0, IDENTITY)
        with pytest.raises(ConfigError):
            NoiseSpec.from_decay(space_pi, "nemytskii", 1.0, 0.5, IDENTITY)
        NoiseSpec.from_decay(space_pi, "additive", 1.0, 0.0)  # fine at truncation

    def test_bad_kind(self):
        with pytest.raises(ConfigError):
            NoiseSpec("levy", np.ones(3))


class TestIncrement:
    def test_zero_dt(self, space_pi):
        assert np.all(wiener_increment(space_pi, 0.0, (1, 2, 3)).dW == 0)
        with pytest.raises(UsageError):
            wiener_increment(space_pi, -1.0, (1, 2, 3))

    def test_replay(self, space_pi):
        a = wiener_increment(space_pi, 0.01, (7, 3, 1000)).dW
        b = wiener_increment(space_pi, 0.01, (7, 3, 1000)).dW
        assert a.tobytes() == b.tobytes()
        c = wiener_increment(space_pi, 0.01, (7, 4, 1000)).dW
        assert not np.array_equal(a, c)

    def test_moments(self):
        n, dt = 100_000, 0.01
        z = NormalStream(3, 0, 4).rows(0, n) * math.sqrt(dt)
        sd = math.sqrt(dt)
        assert np.all(np.abs(z.mean(axis=0)) <= 4 * sd / math.sqrt(n))
        assert np.all(np.abs(z.var(axis=0) / dt - 1) <= 0.05)
        corr = np.corrcoef(z.T)[np.triu_indices(4, 1)]
        assert np.all(np.abs(corr) <= 4 / math.sqrt(n))


class TestRng:
    def test_random_access_matches_sequential(self):
        s = NormalStream(11, 5, 3)
        whole = s.rows(0, 3 * BLOCK + 7)
        assert np.array_equal(NormalStream(11, 5, 3).rows(BLOCK - 2, 9), whole[BLOCK - 2:BLOCK + 7])
        assert np.array_equal(stream_rows(11, [5], 3, 17, 4)[:, 0], whole[17:21])

    def test_purposes_independent(self):
        a = philox(1, "path", 0).standard_normal(5)
        b = philox(1, "picard", 0).standard_normal(5)
        assert not np.array_equal(a, b)

    def test_stream_range(self):
        with pytest.raises(ValueError):
            philox(0, "path", -1)


class TestApplyB:
    def test_zero_increment(self, space_pi, rng):
        spec = NoiseSpec.from_decay(space_pi, "nemytskii", 1.0, 1.0, IDENTITY)
        u = random_fields(space_pi, 1, rng)
        assert np.all(apply_B(spec, u, np.zeros((1, 16))).coeffs == 0)

    def test_additive_example(self, space_pi):
        spec = NoiseSpec("additive", unit_weights(16))
        dW = np.full(16, 0.3)
        out = apply_B(spec, space_pi.unit(2), WienerIncrement(dW, 0.1)).coeffs
        assert out == pytest.approx(0.3 * unit_weights(16))

    def test_constant_sigma_reduces_to_additive(self, space_pi, rng):
        w = 1.0 / space_pi.modes
        add = NoiseSpec("additive", w)
        mult = NoiseSpec("nemytskii", w, Sigma("const", {"value": 1.0}), beta=1.0)
        u = random_fields(space_pi, 5, rng)
        dW = rng.standard_normal((5, 16))
        assert apply_B(mult, u, dW).coeffs == pytest.approx(apply_B(add, u, dW).coeffs, abs=1e-12)

    def test_dimension_mismatch(self, space_pi):
        with pytest.raises(UsageError):
            apply_B(NoiseSpec("additive", np.ones(16)), space_pi.unit(1), np.zeros(3))


class TestHilbertSchmidt:
    def test_additive(self, space_pi, rng):
        w = 1.0 / space_pi.modes
        spec = NoiseSpec("additive", w)
        u = random_fields(space_pi, 4, rng)
        assert hs_norm(spec, u) ** 2 == pytest.approx(np.full(4, np.sum(w**2)))

    def test_constant_sigma(self, space_pi, rng):
        w = 1.0 / space_pi.modes
        spec = NoiseSpec("nemytskii", w, Sigma("const", {"value": 1.0}), beta=1.0)
        assert hs_norm(spec, random_fields(space_pi, 3, rng)) ** 2 == pytest.approx(np.sum(w**2))

    def test_identity_sigma_quadrature(self, space_pi):
        # int_0^pi e_1^4 dx = 3 / (2 pi)
        spec = NoiseSpec("nemytskii", unit_weights(16), IDENTITY, beta=1.0)
        value = hs_norm(spec, space_pi.unit(1)) ** 2
        x = np.linspace(0, math.pi, 200_001)
        ref = np.trapezoid((2 / math.pi) ** 2 * np.sin(x) ** 4, x)
        assert value == pytest.approx(3 / (2 * math.pi), abs=1e-8)
        assert value == pytest.approx(ref, abs=1e-8)

    def test_distance_zero_for_additive(self, space_pi, rng):
        spec = NoiseSpec("additive", np.ones(16))
        u, v = random_fields(space_pi, 3, rng), random_fields(space_pi, 3, rng)
        assert np.all(hs_distance(spec, u, v) == 0)


class TestConstants:
    def test_lipschitz_examples(self):
        sp = GalerkinSpace(2.0, 4)
        assert lipschitz_bound(NoiseSpec("additive", np.ones(4)), sp) == 0.0
        spec = NoiseSpec("nemytskii", unit_weights(4), IDENTITY, beta=1.0)
        assert lipschitz_bound(spec, sp) == pytest.approx(1.0)

    def test_d_examples(self, space_pi):
        D, D_lit = d_constant(NoiseSpec("additive", unit_weights(16)), space_pi)
        assert (D, D_lit) == (2.0, 1.0)
        assert d_constant(NoiseSpec("additive", np.zeros(16)), space_pi) == (0.0, 0.0)

    @pytest.mark.parametrize("sigma", [IDENTITY, Sigma("sin", {"offset": 1.0, "amplitude": 0.5}),
                                       Sigma("clipped-linear", {"offset": 0.2, "slope": 1.5, "clip": 0.7})])
    def test_validators(self, space_unit, rng, sigma):
        spec = NoiseSpec.from_decay(space_unit, "nemytskii", 0.5, 1.0, sigma)
        u, v = random_fields(space_unit, 1000, rng), random_fields(space_unit, 1000, rng)
        lip = check_lipschitz(spec, u, v)
        growth = check_growth(spec, u)
        assert (lip.checked, lip.violations) == (1000, 0)
        assert (growth.checked, growth.violations) == (1000, 0)

    def test_additive_growth(self, space_pi, rng):
        spec = NoiseSpec.from_decay(space_pi, "additive", 1.0, 1.0)
        assert check_growth(spec, random_fields(space_pi, 1000, rng)).passed
