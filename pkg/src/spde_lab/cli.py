"""Command-line driver: ``spde-lab <verb> [--config PATH | --preset NAME]``.

Exit codes: 0 success, 1 configuration error, 2 a check reported FAIL,
3 numerical failure (blow-up or NaN).
"""

from __future__ import annotations

import argparse
import functools
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import PRESETS, ExperimentConfig
from .drift import (
    build_certificate,
    check_h2,
    check_h3,
    check_h4,
    check_k_lambda,
    compute_a,
    random_fields,
)
from .errors import BlowUpError, ConfigError, UsageError
from .integrator import SimParams, contraction_experiment, convolution_experiment, simulate
from .invariant import (
    OccupationMeasure,
    feller_experiment,
    invariance_trend,
    ou_oracle,
    tightness_check,
    tightness_radii,
)
from .noise import check_growth, check_lipschitz, d_constant, lipschitz_bound
from .rng import philox

VERBS = ("certify", "simulate", "invariant", "tightness", "feller", "contraction",
         "convolution", "ou-check")

EXIT_OK, EXIT_CONFIG, EXIT_FAIL, EXIT_NUMERIC = 0, 1, 2, 3

# resolution of the radius grid on which the duality modulus is tabulated
_A_STEP = 0.05


# output -------------------------------------------------------------------------
def _fmt(x) -> str:
    if isinstance(x, bool) or x is None:
        return json.dumps(x)
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return '"nan"'
    if math.isinf(x):
        return '"inf"' if x > 0 else '"-inf"'
    return format(x, ".17g")


def dumps17(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON text with every float at 17 significant digits."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps17(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj.tolist() if isinstance(obj, np.ndarray) else obj)
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(_fmt(v) for v in seq) + "]"
        return "[\n" + ",\n".join(pad + dumps17(v, indent, _level + 1) for v in seq) + "\n" + end + "]"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (float, int, bool, np.floating, np.integer, np.bool_)) or obj is None:
        return _fmt(obj.item() if isinstance(obj, np.generic) else obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


class OutputWriter:
    """Single writer for one output directory; records a hash per file."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.files: dict[str, str] = {}

    def path(self, name: str) -> Path:
        return self.directory / name

    def _record(self, name: str):
        self.files[name] = hashlib.sha256(self.path(name).read_bytes()).hexdigest()

    def text(self, name: str, text: str):
        self.path(name).write_text(text)
        self._record(name)

    def json(self, name: str, obj):
        self.text(name, dumps17(obj) + "\n")

    def histogram(self, name: str, rows):
        lines = ["bin_lo,bin_hi,mass"]
        lines += [",".join(format(float(v), ".17g") for v in row) for row in rows]
        self.text(name, "\n".join(lines) + "\n")

    def external(self, name: str):
        """Register a file written by another routine."""
        self._record(name)

    def manifest(self, cfg: ExperimentConfig, verb: str, exit_code: int):
        doc = {"verb": verb, "config_hash": cfg.hash(), "seed": cfg.data["sim"]["seed"],
               "build": f"spde_lab {__version__}", "exit_code": exit_code,
               "files": dict(sorted(self.files.items()))}
        self.path("manifest.json").write_text(dumps17(doc) + "\n")


# verbs ----------------------------------------------------------------------------
def _certificate(cfg: ExperimentConfig):
    space, noise = cfg.space(), cfg.noise()
    drift = cfg.drift()
    if drift.is_zero:
        raise ConfigError("drift.coefficients: a certificate needs a nonzero odd polynomial with "
                          "negative leading coefficient")
    D, D_lit = d_constant(noise, space)
    c = cfg.block("certificate")
    return build_certificate(drift, space, D, D_lit, lipschitz_bound(noise, space),
                             c["lambda_star"], c["rho_method"])


def run_certify(cfg, out: OutputWriter):
    cert = _certificate(cfg)
    space, noise, p = cfg.space(), cfg.noise(), cfg.drift()
    c = cfg.block("certificate")
    count = int(c["validation_samples"])
    g = philox(cfg.data["sim"]["seed"], "validate")
    u = random_fields(space, count, g)
    v = random_fields(space, count, g)

    @functools.lru_cache(maxsize=None)
    def a_table(k: int) -> float:
        return compute_a(p, k * _A_STEP)

    # the modulus is nondecreasing in the radius, so rounding up is conservative
    def a(r: float) -> float:
        return a_table(math.ceil(r / _A_STEP - 1e-12))

    h3, g1 = check_h3(p, cert.split, u, v)
    reports = [check_h2(p, u, v, a), h3, g1, check_h4(p, cert.rho, u),
               check_k_lambda(p, cert.rho, u, 1.0), check_k_lambda(p, cert.rho, u, 2.0),
               check_k_lambda(p, cert.rho, u, cert.lambda_star),
               check_lipschitz(noise, u, v), check_growth(noise, u)]
    cert_doc = cert.to_dict()
    cert_doc["a"] = {repr(float(r)): compute_a(p, float(r)) for r in c["a_radii"]}
    out.json("certificate.json", cert_doc)
    passed = all(r.passed for r in reports)
    out.json("validation.json", {
        "validators": [{"name": r.name, "checked": r.checked, "violations": r.violations,
                        "worst_margin": r.worst_margin, "verdict": "PASS" if r.passed else "FAIL"}
                       for r in reports],
        "verdict": "PASS" if passed else "FAIL"})
    return passed, f"kappa={cert.split.kappa:.6g} C={cert.rho.C:.6g} K*={cert.K_lambda_star:.6g}"


def _sim_params(cfg, T=None, burn_in=None):
    s = cfg.data["sim"]
    return SimParams(dt=float(s["dt"]), T=float(s["T"] if T is None else T), seed=int(s["seed"]),
                     stream=0, snapshot_stride=int(s["snapshot_stride"]),
                     burn_in=float(s["burn_in"] if burn_in is None else burn_in))


def _streams(cfg):
    s = cfg.data["sim"]
    if s["streams"] is None:
        return list(range(s["ensemble"]))
    return list(s["streams"])


def _ensemble_x0(cfg):
    space = cfg.space()
    x0 = cfg.x0()
    R = cfg.data["sim"]["ensemble"]
    return space.field(np.broadcast_to(x0.coeffs, (R, space.N)).copy())


def run_simulate(cfg, out: OutputWriter):
    space = cfg.space()
    params = _sim_params(cfg)
    traj = simulate(space, params, cfg.drift(), cfg.noise(), _ensemble_x0(cfg),
                    record_modes=cfg.data["sim"]["record_modes"], streams=_streams(cfg))
    traj.to_csv(out.path("trajectory.csv"), member=0)
    out.external("trajectory.csv")
    if "bin" in cfg.data["output"]["formats"]:
        traj.write_snapshots(out.path("snapshots.bin"), member=0)
        out.external("snapshots.bin")
    R = int(np.prod(traj.batch_shape, dtype=int))
    norm0 = traj.norm0.reshape(len(traj.times), R)
    out.json("report.json", {
        "empirical": {"steps": params.steps, "final_norm0": norm0[-1].tolist(),
                      "max_norm0": norm0.max(axis=0).tolist(),
                      "mean_norm0_sq": float(np.mean(norm0**2))},
        "bounds": {},
        "verdict": "PASS",
        "confidence": {"members": R}})
    if params.burn_in < params.T:
        from .invariant import accumulate
        m = accumulate(traj, params.burn_in)
        out.histogram("histogram.csv", m.histogram_rows("norm0"))
    return True, f"{params.steps} steps, max |u|_0 = {norm0.max():.6g}"


def run_tightness(cfg, out: OutputWriter):
    cert = _certificate(cfg)
    out.json("certificate.json", cert.to_dict())
    space, b = cfg.space(), cfg.block("tightness")
    eps = [float(e) for e in b["eps"]]
    R = int(b["ensemble"])
    m = OccupationMeasure(space, float(b["T"]), float(b["burn_in"]), radii=tightness_radii(eps),
                          seed=cfg.data["sim"]["seed"])
    x0 = cfg.x0()
    X = space.field(np.broadcast_to(x0.coeffs, (R, space.N)).copy())
    simulate(space, _sim_params(cfg, T=b["T"], burn_in=0.0), cfg.drift(), cfg.noise(), X,
             measures=[m], record=False)
    rep = tightness_check(m, cert, x0, eps)
    out.json("report.json", rep.to_dict())
    out.histogram("histogram.csv", m.histogram_rows("norm0"))
    return rep.passed, f"avg |u|_g^2 = {rep.empirical_avg:.6g} vs bound {rep.bound:.6g}"


def run_feller(cfg, out: OutputWriter):
    cert = _certificate(cfg)
    out.json("certificate.json", cert.to_dict())
    b = cfg.block("feller")
    rep = feller_experiment(cfg.space(), cfg.drift(), cfg.noise(), cert, cfg.x0(),
                            deltas=b["deltas"], T=float(b["T"]), dt=float(cfg.data["sim"]["dt"]),
                            pairs=int(b["pairs"]), seed=cfg.data["sim"]["seed"],
                            scaling_times=b["scaling_times"])
    out.json("report.json", rep.to_dict())
    return rep.passed, f"scaling ratios {rep.scaling}"


def run_contraction(cfg, out: OutputWriter):
    b = cfg.block("contraction")
    rep = contraction_experiment(cfg.space(), cfg.drift(), cfg.noise(), cfg.x0(), b["horizons"],
                                 int(b["pairs"]), float(b["p"]), float(cfg.data["sim"]["dt"]),
                                 cfg.data["sim"]["seed"])
    d = rep.to_dict()
    out.json("report.json", d)
    return d["verdict"] == "PASS", f"ratios {rep.ratios}"


def run_convolution(cfg, out: OutputWriter):
    b = cfg.block("convolution")
    rep = convolution_experiment(cfg.space(), cfg.noise().weights, b["horizons"], b["gamma"],
                                 float(b["p"]), int(b["paths"]), float(cfg.data["sim"]["dt"]),
                                 cfg.data["sim"]["seed"])
    d = rep.to_dict()
    out.json("report.json", d)
    return d["verdict"] == "PASS", f"ratios {rep.ratios}"


def run_invariant(cfg, out: OutputWriter):
    b = cfg.block("invariant")
    rep = invariance_trend(cfg.space(), cfg.drift(), cfg.noise(), cfg.x0(), b["horizons"],
                           float(b["delta"]), float(cfg.data["sim"]["dt"]), int(b["capacity"]),
                           int(b["reservoir_stride"]), cfg.data["sim"]["seed"],
                           int(b["permutations"]))
    out.json("report.json", rep.to_dict())
    return rep.passed, f"distances {[r.distance for r in rep.reports]}"


def run_ou_check(cfg, out: OutputWriter):
    space, noise, drift = cfg.space(), cfg.noise(), cfg.drift()
    if not drift.is_zero or noise.kind != "additive":
        raise ConfigError("drift.coefficients: ou-check needs the zero drift and additive noise")
    b = cfg.block("ou_check")
    K = min(int(b["modes"]), space.N)
    R = cfg.data["sim"]["ensemble"]
    m = OccupationMeasure(space, float(b["T"]), float(b["burn_in"]), seed=cfg.data["sim"]["seed"])
    X = space.field(np.broadcast_to(cfg.x0().coeffs, (R, space.N)).copy())
    simulate(space, _sim_params(cfg, T=b["T"], burn_in=0.0), drift, noise, X, measures=[m],
             record=False, record_modes=K, streams=_streams(cfg))
    var = m.mode_variance[:K]
    oracle = ou_oracle(space, noise)[:K]
    rel = np.abs(var - oracle) / oracle
    tol = float(b["tolerance"])
    passed = bool(np.all(rel <= tol))
    out.json("report.json", {
        "empirical": {"mode": list(range(1, K + 1)), "variance": var.tolist(),
                      "mean": m.mode_mean[:K].tolist()},
        "bounds": {"variance_oracle": oracle.tolist(), "relative_tolerance": tol},
        "verdict": "PASS" if passed else "FAIL",
        "confidence": {"relative_error": rel.tolist(), "members": m.members}})
    out.histogram("histogram.csv", m.histogram_rows("mode1"))
    return passed, "rel. errors " + ", ".join(f"{e:.3g}" for e in rel)


RUNNERS = {"certify": run_certify, "simulate": run_simulate, "invariant": run_invariant,
           "tightness": run_tightness, "feller": run_feller, "contraction": run_contraction,
           "convolution": run_convolution, "ou-check": run_ou_check}


# entry point -----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spde-lab", description=__doc__.splitlines()[0])
    ap.add_argument("verb", choices=VERBS)
    src = ap.add_mutually_exclusive_group()
    src.add_argument("--config", type=Path, help="JSON configuration file")
    src.add_argument("--preset", choices=sorted(PRESETS), help="built-in configuration")
    ap.add_argument("--out", type=Path, help="output directory (overrides output.directory)")
    ap.add_argument("--seed", type=int, help="overrides sim.seed and SPDE_SEED")
    ap.add_argument("-q", "--quiet", action="store_true", help="suppress the summary line")
    return ap


def load_config(args) -> ExperimentConfig:
    if args.config is not None:
        cfg = ExperimentConfig.load(args.config)
    elif args.preset is not None:
        cfg = ExperimentConfig.preset(args.preset)
    else:
        raise ConfigError("either --config or --preset is required")
    cfg = cfg.seed_from_env()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = cfg.with_seed(args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
    except (ConfigError, OSError) as e:
        print(f"spde-lab: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = OutputWriter(args.out if args.out is not None else cfg.data["output"]["directory"])
    out.text("config.json", cfg.dumps() + "\n")
    try:
        passed, summary = RUNNERS[args.verb](cfg, out)
        code = EXIT_OK if passed else EXIT_FAIL
        if not args.quiet:
            print(f"{args.verb}: {'PASS' if passed else 'FAIL'} ({summary})")
    except (ConfigError, UsageError) as e:
        print(f"spde-lab: config error: {e}", file=sys.stderr)
        code = EXIT_CONFIG
    except BlowUpError as e:
        print(f"spde-lab: numerical failure: {e}", file=sys.stderr)
        code = EXIT_NUMERIC
    except FloatingPointError as e:
        print(f"spde-lab: numerical failure: {e}", file=sys.stderr)
        code = EXIT_NUMERIC
    out.manifest(cfg, args.verb, code)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
