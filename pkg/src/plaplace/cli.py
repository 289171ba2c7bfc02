"""Command-line front end.

Every command reads an optional key-value config file (``key = value`` per
line, ``#`` comments, lists comma-separated), applies flag overrides, writes
its outputs plus ``manifest.json`` under ``--out`` and exits with

    0 success, 2 configuration error, 3 solver failure, 4 property failure.

Config keys (flags in brackets):

    p [--p]             exponent, or a comma-separated grid for linerr/sweep
    tau [--tau]         smoothing parameter(s)
    lam [--lambda]      noise level
    seed [--seed]       base seed
    mesh_n [--mesh-n]   boundary node count
    cells [--cells]     target number of partition cells
    param [--param]     std, inv, nat or exp (comma-separated for sweep)
    sample [--sample]   A..F (comma-separated for sweep)
    current [--current] cos<j> or sin<j>
    members [--members] sample size
    samples [--samples] number of random tuples for proptest
    threads [--threads] worker cap for sweeps

Any ExperimentConfig field is also accepted by ``sweep``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .energy import EnergyParams, calibrate_constants, verify_inequalities
from .errors import (
    ConfigError,
    FactorizationFailure,
    IllConditioned,
    InequalityViolation,
    MeshGenerationFailure,
    NewtonDivergence,
    PartitionFailure,
    PLaplaceError,
    SingularTangent,
)
from .experiments import (
    ExperimentConfig,
    Setting,
    SweepFailure,
    linearization_error,
    member_seed,
    reconstruction_error,
    sweep,
)
from .forward import PARAMETRIZATIONS, ConductivityField, SolverOptions, solve_forward
from .measurement import basis_labels, project_trace, trig_currents
from .mesh import build_disk_mesh, build_partition, perturb_mesh, save_mesh
from .prior import SAMPLE_CONFIGS, normalized_norm, sample_config, sample_logconductivity, save_samples
from .sensitivity import assemble_jacobian

logger = logging.getLogger("plaplace")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_PROPERTY = 0, 2, 3, 4


def _floats(s):
    return [float(v) for v in str(s).split(",") if v.strip()]


def _strs(s):
    return [v.strip() for v in str(s).split(",") if v.strip()]


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# typed keys shared by all commands
KEYS = {
    "p": _floats,
    "tau": _floats,
    "lam": float,
    "seed": int,
    "mesh_n": int,
    "cells": int,
    "param": _strs,
    "sample": _strs,
    "current": str,
    "members": int,
    "samples": int,
    "threads": int,
    "out": str,
}
# remaining sweep keys, typed from ExperimentConfig
SWEEP_KEYS = {
    "study": str,
    "parametrizations": _strs,
    "p_grid": _floats,
    "taus": _floats,
    "n_members": int,
    "penalty": float,
    "misspecified": _bool,
    "perturb_jitter": float,
    "snapshots": int,
    "snapshot_p": _floats,
    "j_max": int,
    "max_skip_fraction": float,
    "samples_list": _strs,
}
ALIASES = {"lambda": "lam", "mesh-n": "mesh_n"}


def parse_config(path) -> dict:
    """Read ``key = value`` lines; returns ``{key: (value, line_number)}``."""
    out = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    with fh:
        for n, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected 'key = value', got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            key = ALIASES.get(key, key).replace("-", "_")
            if key not in KEYS and key not in SWEEP_KEYS:
                raise ConfigError(f"{path}:{n}: unknown field {key!r}")
            out[key] = (value, n)
    return out


def resolve(args, command: str) -> dict:
    """Typed settings from config file then flag overrides."""
    raw = parse_config(args.config) if args.config else {}
    settings = {}
    for key, (value, n) in raw.items():
        conv = KEYS.get(key) or SWEEP_KEYS[key]
        try:
            settings[key] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"{args.config}:{n}: field {key!r}: {exc}") from None
    for key in KEYS:
        v = getattr(args, key, None)
        if v is not None:
            try:
                settings[key] = KEYS[key](v) if KEYS[key] in (_floats, _strs) else v
            except ValueError as exc:
                raise ConfigError(f"flag --{key.replace('_', '-')}: {exc}") from None
    for key in settings.get("param", []):
        if key not in PARAMETRIZATIONS:
            raise ConfigError(f"field 'param': unknown parametrization {key!r}")
    for key in settings.get("sample", []):
        if key.upper() not in SAMPLE_CONFIGS:
            raise ConfigError(f"field 'sample': unknown sample {key!r}")
    for key in ("p",):
        if any(v <= 1 for v in settings.get(key, [])):
            raise ConfigError("field 'p': every value must exceed 1")
    if any(v < 0 for v in settings.get("tau", [])):
        raise ConfigError("field 'tau': values must be non-negative")
    settings.setdefault("out", "out")
    return settings


def _single(settings, key, default):
    v = settings.get(key, default)
    if isinstance(v, list):
        if len(v) != 1:
            raise ConfigError(f"field {key!r}: expected a single value, got {len(v)}")
        return v[0]
    return v


def _write_manifest(out, command, settings, extra):
    os.makedirs(out, exist_ok=True)
    manifest = dict(command=command, version=__version__, settings=settings, created=time.strftime("%Y-%m-%dT%H:%M:%S"))
    manifest.update(extra)
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
    # the resolved settings as a config file: `<command> --config run.cfg` replays the run
    with open(os.path.join(out, "run.cfg"), "w") as fh:
        fh.write(f"# replay with: plaplace {command} --config run.cfg\n")
        for key, value in sorted(settings.items()):
            if isinstance(value, (list, tuple)):
                value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            fh.write(f"{key} = {value}\n")
    return manifest


def _mesh_and_partition(settings):
    mesh = build_disk_mesh(settings.get("mesh_n", 128))
    part = build_partition(mesh, target_cells=settings.get("cells", 240))
    return mesh, part


def _kappa(settings, part):
    """kappa = 0, or member 0 of the configured sample when one is given."""
    if "sample" not in settings:
        return np.zeros(part.n_cells), None
    name = _single(settings, "sample", None).upper()
    kappa = sample_logconductivity(sample_config(name, part), 1, member_seed(settings.get("seed", 0), 11, name))[0]
    return kappa, name


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_mesh_build(settings):
    out = settings["out"]
    mesh, part = _mesh_and_partition(settings)
    os.makedirs(out, exist_ok=True)
    save_mesh(os.path.join(out, "mesh.txt"), mesh, part)
    info = dict(mesh=mesh.digest, nodes=mesh.n_nodes, triangles=mesh.n_triangles, cells=part.n_cells,
                area_spread=part.cell_areas_spread())
    if "seed" in settings:
        pm = perturb_mesh(mesh, settings["seed"])
        pp = build_partition(pm, part.m_rings, settings.get("cells", 240))
        save_mesh(os.path.join(out, "mesh_perturbed.txt"), pm, pp)
        info["perturbed_mesh"] = pm.digest
    _write_manifest(out, "mesh-build", settings, info)
    print(json.dumps(info))


def _parse_current(label, mesh):
    label = label.strip().lower()
    if label[:3] not in ("cos", "sin") or not label[3:].isdigit() or int(label[3:]) < 1:
        raise ConfigError(f"field 'current': expected cos<j> or sin<j>, got {label!r}")
    j = int(label[3:])
    return trig_currents(mesh, j)[2 * (j - 1) + (label[:3] == "sin")], j


def cmd_solve(settings):
    out = settings["out"]
    mesh, part = _mesh_and_partition(settings)
    p = _single(settings, "p", 2.0)
    tau = _single(settings, "tau", 0.0)
    f, j = _parse_current(settings.get("current", "cos1"), mesh)
    kappa, name = _kappa(settings, part)
    sigma = ConductivityField.from_log(kappa, "std", part)
    u = solve_forward(sigma, EnergyParams(p, tau), f, SolverOptions())
    os.makedirs(out, exist_ok=True)
    u.save(os.path.join(out, "solution.txt"))
    j_max = max(j, 8) if 2 * max(j, 8) <= mesh.n_boundary / 4 else j
    coef = project_trace(u.trace(), j_max)
    labels = basis_labels(j_max)
    with open(os.path.join(out, "trace_coefficients.csv"), "w") as fh:
        fh.write(",".join(labels) + "\n" + ",".join(repr(float(c)) for c in coef) + "\n")
    own = float(coef[labels.index(f.label)])
    info = dict(mesh=mesh.digest, sample=name, current=f.label, coefficient=own, newton_steps=u.newton_steps,
                residual=u.residual)
    _write_manifest(out, "solve", settings, info)
    print(json.dumps(info))


def cmd_jacobian(settings):
    out = settings["out"]
    mesh, part = _mesh_and_partition(settings)
    p = _single(settings, "p", 2.0)
    tau = _single(settings, "tau", 0.0)
    param = _single(settings, "param", "exp")
    sigma0 = ConductivityField.from_log(np.zeros(part.n_cells), param, part, p)
    J, U0 = assemble_jacobian(sigma0, EnergyParams(p, tau), trig_currents(mesh, 8))
    os.makedirs(out, exist_ok=True)
    J.save(os.path.join(out, "jacobian.npz"))
    U0.to_csv(os.path.join(out, "U0.csv"))
    info = dict(shape=list(J.shape), **J.metadata())
    _write_manifest(out, "jacobian", settings, info)
    print(json.dumps(info))


def cmd_proptest(settings):
    out = settings["out"]
    n = settings.get("samples", 100_000)
    cal = calibrate_constants((1.2, 4.0))
    rep = verify_inequalities(n, settings.get("seed", 0), (1.2, 4.0), (0.0, 1.0), raise_on_violation=False,
                              calibration=cal)
    info = dict(n_samples=n, ok=rep.ok, failed=rep.failed, worst_margin=rep.worst_margin, constants=rep.constants)
    _write_manifest(out, "proptest", settings, info)
    print(rep.summary())
    if not rep.ok:
        name = next(k for k, v in rep.failed.items() if v)
        raise InequalityViolation(name, rep.witness.get(name))


def cmd_sample(settings):
    out = settings["out"]
    mesh, part = _mesh_and_partition(settings)
    os.makedirs(out, exist_ok=True)
    names = [s.upper() for s in settings.get("sample", ["A"])]
    n = settings.get("members", 100)
    seed = settings.get("seed", 0)
    info = dict(mesh=mesh.digest, cells=part.n_cells, samples={})
    for name in names:
        model = sample_config(name, part)
        kappa = sample_logconductivity(model, n, member_seed(seed, 11, name))
        save_samples(os.path.join(out, f"sample_{name}.csv"), kappa, model, seed)
        info["samples"][name] = dict(varsigma2=model.varsigma2, b=model.b, n=n, normalized_norm=normalized_norm(kappa))
    _write_manifest(out, "sample", settings, info)
    print(json.dumps(info["samples"]))


def _study_inputs(settings):
    setting = Setting(settings.get("mesh_n", 128), settings.get("cells", 240), seed=settings.get("seed", 0))
    name = _single(settings, "sample", "A").upper()
    model = sample_config(name, setting.ref_partition)
    n = settings.get("members", 10)
    kappa = sample_logconductivity(model, n, member_seed(settings.get("seed", 0), 11, name))
    return setting, name, model, kappa


def cmd_linerr(settings):
    out = settings["out"]
    setting, name, _, kappa = _study_inputs(settings)
    params = settings.get("param", list(PARAMETRIZATIONS))
    rows = []
    for p in settings.get("p", [2.0]):
        for tau in settings.get("tau", [0.0]):
            J_std, U0 = setting.operators(p, tau)
            for par in params:
                e = linearization_error(kappa, par, p, tau, setting.jacobian(par, p, tau), U0,
                                        setting.ref_partition, setting.opts)
                rows.append(dict(sample=name, parametrization=par, p=p, tau=tau, e=e))
                print(json.dumps(rows[-1]))
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "linerr.csv"), "w") as fh:
        fh.write("# schema=plaplace-linerr version=1\nsample,parametrization,p,tau,e\n")
        for r in rows:
            fh.write(f"{r['sample']},{r['parametrization']},{r['p']!r},{r['tau']!r},{r['e']!r}\n")
    _write_manifest(out, "linerr", settings, dict(mesh=setting.digests(), members=len(kappa)))


def cmd_invert(settings):
    out = settings["out"]
    setting, name, model, kappa = _study_inputs(settings)
    lam = settings.get("lam", 1e-3)
    seed = settings.get("seed", 0)
    seeds = [member_seed(seed, 23, name, k) for k in range(len(kappa))]
    rows = []
    for p in settings.get("p", [2.0]):
        tau = _single(settings, "tau", 0.0)
        for par in settings.get("param", ["exp"]):
            iota = reconstruction_error(kappa, par, p, tau, lam, seeds, setting, model.Sigma)
            rows.append(dict(sample=name, parametrization=par, p=p, tau=tau, lam=lam, iota=iota))
            print(json.dumps(rows[-1]))
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "recon.csv"), "w") as fh:
        fh.write("# schema=plaplace-invert version=1\nsample,parametrization,p,tau,lam,iota\n")
        for r in rows:
            fh.write(f"{r['sample']},{r['parametrization']},{r['p']!r},{r['tau']!r},{r['lam']!r},{r['iota']!r}\n")
    _write_manifest(out, "invert", settings, dict(mesh=setting.digests(), members=len(kappa)))


def cmd_sweep(settings):
    out = settings["out"]
    cfg = {}
    mapping = dict(p="p_grid", tau="taus", lam="lam", seed="seed", mesh_n="mesh_n", cells="cells",
                   param="parametrizations", sample="samples", members="n_members", threads="threads")
    for key, value in settings.items():
        if key in mapping:
            cfg[mapping[key]] = value
        elif key in SWEEP_KEYS:
            cfg["samples" if key == "samples_list" else key] = value
    if "samples" in settings and "sample" not in settings and "samples_list" not in settings:
        raise ConfigError("field 'samples' is the proptest tuple count; use 'sample' to choose A..F")
    config = ExperimentConfig.from_dict(cfg)
    est = config.estimated_seconds()
    if est > 3600:
        print(json.dumps(dict(warning="long-running", estimated_hours=round(est / 3600, 2))), file=sys.stderr)
    res = sweep(config, out)
    print(json.dumps(dict(files=res.files, failures=len(res.failures), elapsed=res.manifest["elapsed_seconds"])))


COMMANDS = {
    "mesh-build": cmd_mesh_build,
    "solve": cmd_solve,
    "jacobian": cmd_jacobian,
    "proptest": cmd_proptest,
    "sample": cmd_sample,
    "linerr": cmd_linerr,
    "invert": cmd_invert,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plaplace", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key-value config file")
        sp.add_argument("--p", help="exponent (comma-separated grid where a command accepts several)")
        sp.add_argument("--tau", help="smoothing parameter(s)")
        sp.add_argument("--lambda", dest="lam", type=float, help="noise standard deviation")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--mesh-n", dest="mesh_n", type=int, help="boundary node count")
        sp.add_argument("--cells", type=int, help="target partition cell count")
        sp.add_argument("--param", help="std, inv, nat or exp")
        sp.add_argument("--sample", help="prior sample A..F")
        sp.add_argument("--current", help="cos<j> or sin<j>")
        sp.add_argument("--members", type=int, help="sample size")
        sp.add_argument("--samples", type=int, help="random tuples for proptest")
        sp.add_argument("--threads", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")
    return parser


def _fail(category, code, exc):
    print(json.dumps(dict(error=category, type=type(exc).__name__, message=str(exc))), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s %(message)s")
    try:
        settings = resolve(args, args.command)
        if settings.get("threads"):
            os.environ.setdefault("OMP_NUM_THREADS", str(settings["threads"]))
        COMMANDS[args.command](settings)
    except (ConfigError, MeshGenerationFailure, PartitionFailure) as exc:
        return _fail("config", EXIT_CONFIG, exc)
    except (NewtonDivergence, SingularTangent, FactorizationFailure, IllConditioned, SweepFailure) as exc:
        return _fail("solver", EXIT_SOLVER, exc)
    except InequalityViolation as exc:
        return _fail("property", EXIT_PROPERTY, exc)
    except PLaplaceError as exc:
        return _fail("solver", EXIT_SOLVER, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
