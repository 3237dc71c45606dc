"""Experiment configuration: JSON schema, presets, validation.

A config is one JSON document::

    {
      "model":  {"L": 1.0, "N": 16, "M": 128, "gamma": 0.3},
      "drift":  {"coefficients": [1.0, 0.0, -1.0]},
      "noise":  {"kind": "nemytskii", "q0": 0.5, "beta": 1.0,
                 "sigma": {"name": "sin", "params": {"offset": 1.0, "amplitude": 0.5}},
                 "lip_sigma": 0.5},
      "sim":    {"dt": 0.002, "T": 10.0, "burn_in": 0.0, "seed": 0, "streams": null,
                 "snapshot_stride": 10, "ensemble": 1, "record_modes": 4},
      "x0":     [0.5],
      "certificate": {...}, "tightness": {...}, "feller": {...},
      "contraction": {...}, "convolution": {...}, "invariant": {...},
      "ou_check": {...},
      "output": {"directory": "out", "formats": ["csv", "json", "bin"]}
    }

Missing blocks take their defaults; unknown keys are rejected.  Errors name
the offending key path and, when the source text is known, its line.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .drift import OddPolynomial, Polynomial
from .errors import ConfigError
from .noise import NoiseSpec, Sigma
from .spectral import GalerkinSpace

DEFAULTS = {
    "model": {"L": 1.0, "N": 16, "M": None, "gamma": 0.3},
    "drift": {"coefficients": [1.0, 0.0, -1.0]},
    "noise": {"kind": "additive", "q0": 1.0, "beta": 1.0,
              "sigma": {"name": "const", "params": {}}, "lip_sigma": None},
    "sim": {"dt": 1e-3, "T": 1.0, "burn_in": 0.0, "seed": 0, "streams": None,
            "snapshot_stride": 10, "ensemble": 1, "record_modes": 4},
    "x0": [0.0],
    "certificate": {"lambda_star": None, "rho_method": "sharp", "validation_samples": 1000,
                    "a_radii": [0.0, 0.5, 1.0, 2.0, 3.0]},
    "tightness": {"T": 500.0, "burn_in": 0.0, "ensemble": 32, "eps": [0.01, 0.1, 1.0]},
    "feller": {"deltas": [0.01, 0.1], "T": 2.0, "pairs": 1000, "scaling_times": [0.5, 1.0, 2.0]},
    "contraction": {"horizons": [0.05, 0.2], "pairs": 1000, "p": 6.0},
    "convolution": {"horizons": [0.05, 0.1, 0.2, 0.4], "paths": 1000, "p": 6.0, "gamma": None},
    "invariant": {"horizons": [100.0, 400.0, 1600.0], "delta": 0.5, "capacity": 400,
                  "reservoir_stride": 50, "permutations": 199},
    "ou_check": {"T": 2000.0, "burn_in": 20.0, "modes": 4, "tolerance": 0.1},
    "output": {"directory": "out", "formats": ["csv", "json", "bin"]},
}

PRESETS = {
    "allen-cahn-like": {
        "model": {"L": 1.0, "N": 16, "M": 128, "gamma": 0.3},
        "drift": {"coefficients": [1.0, 0.0, -1.0]},
        "noise": {"kind": "nemytskii", "q0": 0.5, "beta": 1.0,
                  "sigma": {"name": "sin", "params": {"offset": 1.0, "amplitude": 0.5}},
                  "lip_sigma": 0.5},
        "sim": {"dt": 2e-3, "T": 10.0},
        "x0": [0.5],
    },
    "linear-ou": {
        "model": {"L": math.pi, "N": 16, "M": 64, "gamma": 0.3},
        "drift": {"coefficients": []},
        "noise": {"kind": "additive", "q0": 1.0, "beta": 1.0},
        "sim": {"dt": 1e-3, "T": 10.0},
        "x0": [0.0],
    },
    "cubic-strong": {
        "model": {"L": math.pi, "N": 16, "M": 128, "gamma": 0.3},
        "drift": {"coefficients": [3.0, 0.0, -1.0]},
        "noise": {"kind": "additive", "q0": 0.5, "beta": 1.0},
        "sim": {"dt": 2e-3, "T": 10.0},
        "x0": [1.0],
    },
}


def _merge(base: dict, over: dict, path=()) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"{'.'.join((*path, k))}: unknown key")
        if isinstance(base[k], dict) and k != "params":
            if not isinstance(v, dict):
                raise ConfigError(f"{'.'.join((*path, k))}: expected an object")
            out[k] = _merge(base[k], v, (*path, k))
        else:
            out[k] = copy.deepcopy(v)
    return out


class _Located(ConfigError):
    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{'.'.join(path)}: {message}")


def _need(cond, path, message):
    if not cond:
        raise _Located(tuple(path.split(".")), message)


@dataclass
class ExperimentConfig:
    """Validated configuration.  ``data`` is the full document with defaults filled."""

    data: dict
    source: str | None = field(default=None, compare=False)

    def __post_init__(self):
        try:
            self.validate()
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(f"ill-typed value: {e}") from None

    # construction ----------------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict, source: str | None = None) -> ExperimentConfig:
        d = dict(d)
        preset = d.pop("preset", None)
        base = DEFAULTS
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"preset: unknown preset {preset!r}")
            base = _merge(DEFAULTS, PRESETS[preset])
        return cls(_merge(base, d), source)

    @classmethod
    def preset(cls, name: str) -> ExperimentConfig:
        return cls.from_dict({"preset": name})

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        text = Path(path).read_text()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}: malformed JSON: {e.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}:1: top level must be an object")
        try:
            return cls.from_dict(raw, source=str(path))
        except ConfigError as e:
            line = locate(text, getattr(e, "path", None) or _path_of(str(e)))
            raise ConfigError(f"{path}:{line}: {e}") from None

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def dumps(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.data, sort_keys=True).encode()).hexdigest()

    def with_seed(self, seed: int) -> ExperimentConfig:
        d = self.to_dict()
        d["sim"]["seed"] = int(seed)
        return ExperimentConfig(d, self.source)

    def seed_from_env(self) -> ExperimentConfig:
        """Apply the ``SPDE_SEED`` override when it is set."""
        env = os.environ.get("SPDE_SEED")
        if env is None:
            return self
        try:
            return self.with_seed(int(env))
        except ValueError:
            raise ConfigError(f"SPDE_SEED must be an integer, got {env!r}") from None

    # validation ------------------------------------------------------------
    def validate(self):
        d = self.data
        m = d["model"]
        _need(isinstance(m["N"], int) and m["N"] >= 1, "model.N", "must be an integer >= 1")
        _need(m["L"] > 0, "model.L", "must be positive")
        _need(0.25 < m["gamma"] < 0.5, "model.gamma", "must lie in (1/4, 1/2)")
        coeffs = d["drift"]["coefficients"]
        _need(isinstance(coeffs, list), "drift.coefficients", "must be a list")
        poly = Polynomial(coeffs)
        if not poly.is_zero:
            _need(poly.degree % 2 == 1, "drift.coefficients", "polynomial degree must be odd")
            _need(poly.leading < 0, "drift.coefficients", "leading coefficient must be negative")
        if m["M"] is not None:
            floor = GalerkinSpace.min_grid(m["N"], max(poly.degree, 1))
            _need(m["M"] >= floor, "model.M", f"must be >= 2(d+1)N = {floor} for anti-aliasing")
        n = d["noise"]
        _need(n["kind"] in ("additive", "nemytskii"), "noise.kind", "must be 'additive' or 'nemytskii'")
        _need(n["sigma"]["name"] in ("const", "sin", "clipped-linear"), "noise.sigma.name",
              "must be one of const, sin, clipped-linear")
        if n["kind"] == "nemytskii" and n["q0"] != 0:
            _need(n["beta"] > 0.5, "noise.beta", "must exceed 1/2 so the weights are square-summable")
        intrinsic = Sigma(n["sigma"]["name"], n["sigma"]["params"]).lip
        if n["lip_sigma"] is not None:
            _need(n["lip_sigma"] >= intrinsic, "noise.lip_sigma",
                  f"declared Lipschitz constant is below the profile's ({intrinsic})")
        s = d["sim"]
        _need(s["dt"] > 0, "sim.dt", "must be positive")
        _need(s["T"] >= s["dt"], "sim.T", "must be >= dt")
        _need(s["burn_in"] < s["T"], "sim.burn_in", "must be below T")
        _need(isinstance(s["snapshot_stride"], int) and s["snapshot_stride"] >= 1,
              "sim.snapshot_stride", "must be an integer >= 1")
        _need(isinstance(s["ensemble"], int) and s["ensemble"] >= 1, "sim.ensemble",
              "must be an integer >= 1")
        _need(s["streams"] is None or (isinstance(s["streams"], list) and len(s["streams"]) == s["ensemble"]
              and all(isinstance(k, int) and k >= 0 for k in s["streams"])),
              "sim.streams", "must be null or one non-negative stream id per ensemble member")
        _need(isinstance(s["seed"], int) and s["seed"] >= 0, "sim.seed", "must be a non-negative integer")
        _need(isinstance(d["x0"], list) and len(d["x0"]) <= m["N"], "x0",
              "must be a list of at most N coefficients")
        _need(all(math.isfinite(float(v)) for v in d["x0"]), "x0", "coefficients must be finite")
        c = d["certificate"]
        _need(c["rho_method"] in ("sharp", "young"), "certificate.rho_method", "must be 'sharp' or 'young'")
        if c["lambda_star"] is not None and not poly.is_zero:
            D = self._D()
            _need(c["lambda_star"] > D, "certificate.lambda_star", f"must exceed D = {D}")
        _need(all(e > 0 for e in d["tightness"]["eps"]), "tightness.eps", "must be positive")
        _need(all(x != 0 for x in d["feller"]["deltas"]), "feller.deltas", "must be nonzero")
        _need(d["contraction"]["p"] > 4, "contraction.p", "must exceed 4")
        _need(d["convolution"]["p"] > 2, "convolution.p", "must exceed 2")
        g = d["convolution"]["gamma"]
        _need(g is None or 0.25 < g < 0.5, "convolution.gamma", "must lie in (1/4, 1/2)")
        _need(d["invariant"]["delta"] > 0, "invariant.delta", "must be positive")
        _need(d["ou_check"]["burn_in"] < d["ou_check"]["T"], "ou_check.burn_in", "must be below T")

    def _D(self) -> float:
        from .noise import d_constant
        return d_constant(self.noise(), self.space())[0]

    # model objects ---------------------------------------------------------
    def space(self) -> GalerkinSpace:
        m = self.data["model"]
        deg = max(Polynomial(self.data["drift"]["coefficients"]).degree, 1)
        return GalerkinSpace(float(m["L"]), int(m["N"]), m["M"], float(m["gamma"]), deg)

    def drift(self) -> Polynomial:
        coeffs = self.data["drift"]["coefficients"]
        p = Polynomial(coeffs)
        return p if p.is_zero else OddPolynomial(coeffs)

    def noise(self) -> NoiseSpec:
        n = self.data["noise"]
        sigma = Sigma(n["sigma"]["name"], n["sigma"]["params"], n["lip_sigma"])
        return NoiseSpec.from_decay(self.space(), n["kind"], float(n["q0"]), float(n["beta"]), sigma)

    def x0(self):
        space = self.space()
        c = np.zeros(space.N)
        vals = self.data["x0"]
        c[: len(vals)] = vals
        return space.field(c)

    def block(self, name: str) -> dict:
        return self.data[name]


def _path_of(message: str):
    head = message.split(":", 1)[0]
    return tuple(head.split(".")) if head else None


def locate(text: str, path) -> int:
    """Line number of the innermost key of ``path`` in JSON ``text`` (1 if absent)."""
    if not path:
        return 1
    pos = 0
    found = None
    for key in path:
        i = text.find(f'"{key}"', pos)
        if i < 0:
            break
        found, pos = i, i + 1
    return 1 if found is None else text.count("\n", 0, found) + 1
