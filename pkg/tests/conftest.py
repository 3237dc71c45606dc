import numpy as np
import pytest

from spde_lab.drift import OddPolynomial, build_certificate
from spde_lab.noise import NoiseSpec, Sigma, d_constant, lipschitz_bound
from spde_lab.spectral import GalerkinSpace


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: Monte-Carlo runs taking more than a few seconds")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def space_pi():
    return GalerkinSpace(np.pi, 16, max_degree=3)


@pytest.fixture
def space_unit():
    return GalerkinSpace(1.0, 16, M=128, max_degree=3)


@pytest.fixture
def allen_cahn(space_unit):
    """Cubic drift with sine-profile multiplicative noise on the unit interval."""
    f = OddPolynomial([1.0, 0.0, -1.0])
    noise = NoiseSpec.from_decay(space_unit, "nemytskii", 0.5, 1.0,
                                 Sigma("sin", {"offset": 1.0, "amplitude": 0.5}))
    D, D_lit = d_constant(noise, space_unit)
    cert = build_certificate(f, space_unit, D, D_lit, lipschitz_bound(noise, space_unit))
    return space_unit, f, noise, cert


_ACCEPTANCE: list[str] = []


@pytest.fixture
def report_criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion and echo it."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
