"""Linearization-error and one-step reconstruction-error studies.

Both studies draw log-conductivity samples from the Gaussian prior, simulate
boundary measurements for every member and every (p, tau), and compare them
with the linearization around the homogeneous coefficient.  Forward solves
dominate the cost; for one member and tau they are marched along the p-grid
outward from the grid point nearest 2, each solve warm-started from its
neighbour.

Output tables are CSV with a ``# schema=...`` first line; every sweep also
writes ``manifest.json`` with the full configuration, seeds, mesh digests and
member failures.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .energy import EnergyParams
from .errors import ConfigError, PLaplaceError
from .forward import PARAMETRIZATIONS, ConductivityField, SolverOptions, base_point, power_exponent
from .measurement import add_noise, simulate_measurement, trig_currents
from .mesh import build_disk_mesh, build_partition, perturb_mesh
from .prior import SAMPLE_CONFIGS, lognormal_moments, normalized_norm, sample_config, sample_logconductivity
from .reconstruct import MapOperator, clip_mask, to_log_conductivity
from .sensitivity import JacobianMatrix, assemble_jacobian, parameter_weight

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
# seconds per (member, p, tau) forward sweep point at N=128, 16 currents
_COST_PER_POINT_128 = 0.2
LONG_RUNNING_SECONDS = 3600.0

# stream tags for seed derivation
_TAG_SAMPLE, _TAG_NOISE, _TAG_MESH = 11, 23, 37


class SweepFailure(PLaplaceError, RuntimeError):
    """Too many sample members failed; partial results were written."""


def default_p_grid(n: int = 16):
    return tuple(float(v) for v in np.linspace(1.5, 3.0, n))


@dataclass
class ExperimentConfig:
    study: str = "linerr"                 # linerr, recon or both
    samples: tuple = ("A", "B", "C", "D")
    parametrizations: tuple = PARAMETRIZATIONS
    p_grid: tuple = field(default_factory=default_p_grid)
    taus: tuple = (0.0, 0.1)
    n_members: int = 100
    mesh_n: int = 128
    cells: int = 240
    lam: float = 1e-3
    penalty: float = 1.0
    misspecified: bool = False            # also reconstruct with p = 2 operators
    perturb_jitter: float = 0.25
    snapshots: int = 3
    snapshot_p: tuple = ()                # empty: first, nearest-2 and last grid point
    j_max: int = 8
    seed: int = 0
    threads: int = 1
    max_skip_fraction: float = 0.01

    def __post_init__(self):
        self.samples = tuple(str(s).upper() for s in np.atleast_1d(self.samples))
        self.parametrizations = tuple(np.atleast_1d(self.parametrizations).tolist())
        self.p_grid = tuple(float(p) for p in np.atleast_1d(self.p_grid))
        self.taus = tuple(float(t) for t in np.atleast_1d(self.taus))
        self.snapshot_p = tuple(float(p) for p in np.atleast_1d(self.snapshot_p)) if len(self.snapshot_p) else ()
        self.validate()

    def validate(self):
        if self.study not in ("linerr", "recon", "both"):
            raise ConfigError(f"study must be linerr, recon or both, not {self.study!r}")
        for s in self.samples:
            if s not in SAMPLE_CONFIGS:
                raise ConfigError(f"unknown sample {s!r}")
        for k in self.parametrizations:
            if k not in PARAMETRIZATIONS:
                raise ConfigError(f"unknown parametrization {k!r}")
        if not self.p_grid or min(self.p_grid) <= 1:
            raise ConfigError("p_grid must be non-empty with every p > 1")
        if not self.taus or min(self.taus) < 0:
            raise ConfigError("taus must be non-empty and non-negative")
        if self.n_members < 1:
            raise ConfigError("n_members must be >= 1")
        if self.lam <= 0 or self.penalty <= 0:
            raise ConfigError("lam and penalty must be positive")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def estimated_seconds(self) -> float:
        """Rough cost model from measured per-solve timings."""
        scale = (self.mesh_n / 128.0) ** 2.2
        n_points = len(self.samples) * self.n_members * len(self.p_grid)
        if self.study in ("linerr", "both"):
            n_points_lin = n_points * len(self.taus)
        else:
            n_points_lin = 0
        n_points_rec = n_points if self.study in ("recon", "both") else 0
        return _COST_PER_POINT_128 * scale * (n_points_lin + n_points_rec)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def member_seed(seed: int, tag: int, sample: str, member: int | None = None):
    out = [int(seed), tag, ord(sample)]
    return out if member is None else out + [int(member)]


# ---------------------------------------------------------------------------
# Shared geometry and operators
# ---------------------------------------------------------------------------

class Setting:
    """Reference mesh for operators, perturbed mesh for data, and matching
    cell partitions (same cell layout, so cell vectors carry over)."""

    def __init__(self, mesh_n=128, cells=240, perturb_jitter=0.25, seed=0, j_max=8, opts=None):
        self.opts = opts or SolverOptions()
        self.j_max = j_max
        self.ref_mesh = build_disk_mesh(mesh_n)
        self.ref_partition = build_partition(self.ref_mesh, target_cells=cells)
        if perturb_jitter > 0:
            self.data_mesh = perturb_mesh(self.ref_mesh, [int(seed), _TAG_MESH], perturb_jitter)
        else:
            self.data_mesh = self.ref_mesh
        self.data_partition = build_partition(self.data_mesh, self.ref_partition.m_rings, cells)
        if not np.array_equal(self.data_partition.sectors, self.ref_partition.sectors):
            raise ConfigError("data and reference partitions differ in layout")
        self.ref_currents = trig_currents(self.ref_mesh, j_max)
        self._ops = {}

    @property
    def n_cells(self) -> int:
        return self.ref_partition.n_cells

    def operators(self, p: float, tau: float):
        """``(J_std, U0)`` at sigma = 1 on the reference mesh, cached."""
        key = (float(p), float(tau))
        if key not in self._ops:
            sigma0 = ConductivityField.constant(1.0, self.ref_partition)
            self._ops[key] = assemble_jacobian(sigma0, EnergyParams(p, tau), self.ref_currents, opts=self.opts)
        return self._ops[key]

    def jacobian(self, parametrization: str, p: float, tau: float) -> JacobianMatrix:
        J, _ = self.operators(p, tau)
        return reparametrize(J, parametrization, p)

    def digests(self) -> dict:
        return {"reference": self.ref_mesh.digest, "data": self.data_mesh.digest}


def reparametrize(J_std: JacobianMatrix, parametrization: str, p: float, sigma0_cells=None) -> JacobianMatrix:
    """Jacobian in another parametrization by scaling the columns with
    dsigma/dx; exact because the derivative right-hand side is linear in the
    weight."""
    if J_std.parametrization != "std":
        raise ValueError("expected a conductivity Jacobian")
    if sigma0_cells is None:
        sigma0_cells = np.ones(J_std.shape[1])
    w = parameter_weight(sigma0_cells, parametrization, p)
    base = base_point(parametrization)
    return JacobianMatrix(J_std.entries * w[None, :], J_std.p, J_std.tau, parametrization, base,
                          J_std.mesh_digest, J_std.j_max)


def sample_to_parameter(kappa, parametrization: str, p: float) -> np.ndarray:
    """Map log-conductivities to the parameter vector x of a parametrization."""
    kappa = np.asarray(kappa, dtype=float)
    if parametrization == "exp":
        return kappa.copy()
    return np.exp(power_exponent(parametrization, p) * kappa)


def prior_for(parametrization: str, p: float, Sigma):
    """Prior mean and covariance of the parameter induced by N(0, Sigma) on
    the log-conductivity."""
    if parametrization == "exp":
        return np.zeros(Sigma.shape[0]), Sigma
    return lognormal_moments(Sigma, power_exponent(parametrization, p))


# ---------------------------------------------------------------------------
# Forward sweeps along the p-grid
# ---------------------------------------------------------------------------

def march_order(p_values):
    """Indices of ``p_values`` starting at the one nearest 2, then outward on
    both sides, with the warm-start source for each."""
    p = np.asarray(p_values, dtype=float)
    order = np.argsort(p, kind="stable")
    ps = p[order]
    start = int(np.argmin(np.abs(ps - 2.0)))
    steps = [(order[start], None)]
    for k in range(start + 1, len(ps)):
        steps.append((order[k], order[k - 1]))
    for k in range(start - 1, -1, -1):
        steps.append((order[k], order[k + 1]))
    return steps


def measure_along_p(field: ConductivityField, p_values, tau: float, j_max=8, opts=None):
    """Measurement vectors for every p in ``p_values`` (same order)."""
    out = [None] * len(p_values)
    sols = {}
    for idx, src in march_order(p_values):
        params = EnergyParams(p_values[idx], tau)
        init = sols.get(src)
        try:
            U, s = simulate_measurement(field, params, j_max, opts, init, return_solutions=True)
        except PLaplaceError:
            if init is None:
                raise
            logger.info("warm start failed at p=%g, retrying from the linear solution", p_values[idx])
            U, s = simulate_measurement(field, params, j_max, opts, None, return_solutions=True)
        sols[idx] = s
        out[idx] = U
    return out


# ---------------------------------------------------------------------------
# Linearization error
# ---------------------------------------------------------------------------

def relative_linearization_error(U, U0, J, x, x0) -> float:
    U = np.asarray(getattr(U, "values", U), dtype=float)
    U0 = np.asarray(getattr(U0, "values", U0), dtype=float)
    Jm = np.asarray(getattr(J, "entries", J), dtype=float)
    r = U - U0 - Jm @ (x - x0)
    return float(np.linalg.norm(r) / np.linalg.norm(U))


def linearization_error(sample, parametrization: str, p: float, tau: float, J, U0, partition, opts=None) -> float:
    """Mean over the sample of ||U(x) - U0 - J (x - x0)|| / ||U(x)||.

    ``sample`` holds log-conductivity vectors on ``partition``; ``J`` and
    ``U0`` must be the Jacobian and measurement at the homogeneous base point
    for ``parametrization``.
    """
    j_max = getattr(J, "j_max", 8)
    x0 = base_point(parametrization)
    errs = []
    for kappa in np.atleast_2d(sample):
        field_ = ConductivityField.from_log(kappa, "std", partition)
        U = simulate_measurement(field_, EnergyParams(p, tau), j_max, opts)
        errs.append(relative_linearization_error(U, U0, J, sample_to_parameter(kappa, parametrization, p), x0))
    return float(np.mean(errs))


def _linerr_member(setting: Setting, cfg: ExperimentConfig, kappa):
    """Errors of one member, shape (n_tau, n_p, n_param)."""
    field_ = ConductivityField.from_log(kappa, "std", setting.ref_partition)
    out = np.empty((len(cfg.taus), len(cfg.p_grid), len(cfg.parametrizations)))
    for it, tau in enumerate(cfg.taus):
        Us = measure_along_p(field_, cfg.p_grid, tau, cfg.j_max, setting.opts)
        for ip, p in enumerate(cfg.p_grid):
            J_std, U0 = setting.operators(p, tau)
            for ik, par in enumerate(cfg.parametrizations):
                J = reparametrize(J_std, par, p)
                x = sample_to_parameter(kappa, par, p)
                out[it, ip, ik] = relative_linearization_error(Us[ip], U0, J, x, base_point(par))
    return out


# ---------------------------------------------------------------------------
# Reconstruction error
# ---------------------------------------------------------------------------

def simulate_data(setting: Setting, kappa, p_values, tau: float, j_max=8):
    """Noiseless measurements of one target on the data mesh for every p."""
    field_ = ConductivityField.from_log(kappa, "std", setting.data_partition)
    return measure_along_p(field_, p_values, tau, j_max, setting.opts)


def reconstruction_error(
    sample,
    parametrization: str,
    p: float,
    tau: float,
    lam: float,
    seeds,
    setting: Setting,
    Sigma,
    operator_p: float | None = None,
    penalty: float = 1.0,
    data=None,
) -> float:
    """sqrt(pi / M) times the mean of ||kappa - kappa_reco|| over the sample.

    Data are simulated on the perturbed mesh of ``setting`` (or taken from
    ``data``, noiseless, one vector per member) and perturbed by noise drawn
    from ``seeds[k]`` for member k, so the same seeds give the same noise at
    every p.  Operators are evaluated at ``operator_p`` (default ``p``) on the
    reference mesh.
    """
    sample = np.atleast_2d(sample)
    op_p = p if operator_p is None else operator_p
    J = setting.jacobian(parametrization, op_p, tau)
    _, U0 = setting.operators(op_p, tau)
    mean, cov = prior_for(parametrization, op_p, Sigma)
    op = MapOperator(J, mean, cov, lam, base_point(parametrization), penalty)
    errs = []
    for k, kappa in enumerate(sample):
        U = data[k] if data is not None else simulate_data(setting, kappa, [p], tau, J.j_max)[0]
        V = add_noise(U, lam, seeds[k])
        x = op(V, U0)
        kr = to_log_conductivity(x, parametrization, op_p)
        errs.append(np.linalg.norm(kappa - kr))
    return float(math.sqrt(math.pi / sample.shape[1]) * np.mean(errs))


def _recon_member(setting: Setting, cfg: ExperimentConfig, kappa, noise_seed, ops, snapshot_idx):
    """Per-member reconstruction errors, shape (n_variant, n_p, n_param),
    clip counts of the same shape, and snapshot reconstructions."""
    tau = cfg.taus[0]
    Us = simulate_data(setting, kappa, cfg.p_grid, tau, cfg.j_max)
    variants = ops["variants"]
    err = np.empty((len(variants), len(cfg.p_grid), len(cfg.parametrizations)))
    clips = np.zeros_like(err, dtype=int)
    snaps = {}
    scale = math.sqrt(math.pi / len(kappa))
    for ip, p in enumerate(cfg.p_grid):
        V = add_noise(Us[ip], cfg.lam, noise_seed)
        for iv, variant in enumerate(variants):
            op_p = p if variant == "correct" else 2.0
            _, U0 = setting.operators(op_p, tau)
            for ik, par in enumerate(cfg.parametrizations):
                x = ops[(op_p, par)](V, U0)
                clips[iv, ip, ik] = int(clip_mask(x, par).sum())
                kr = to_log_conductivity(x, par, op_p)
                err[iv, ip, ik] = scale * np.linalg.norm(kappa - kr)
                if ip in snapshot_idx and variant == "correct":
                    snaps[(p, par)] = kr
    return err, clips, snaps


# ---------------------------------------------------------------------------
# Sweep driver
# ---------------------------------------------------------------------------

def non_increasing(values, allowed_violations=0, rtol=0.0) -> bool:
    v = np.asarray(values, dtype=float)
    ups = np.sum(v[1:] > v[:-1] * (1 + rtol))
    return bool(ups <= allowed_violations)


def _run_members(fn, n, threads):
    """Apply ``fn`` to member indices; results in index order, exceptions
    returned in place of results."""
    def safe(k):
        try:
            return fn(k)
        except PLaplaceError as exc:
            return exc
    if threads <= 1:
        return [safe(k) for k in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(safe, range(n)))


def _write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema=plaplace-{os.path.basename(path).split('.')[0]} version={SCHEMA_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def read_table(path) -> list[dict]:
    """Rows of a sweep table as dicts with numeric fields converted."""
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    rows = list(csv.DictReader(lines))
    for r in rows:
        for k, v in r.items():
            try:
                r[k] = int(v) if v.lstrip("-").isdigit() else float(v)
            except ValueError:
                pass
    return rows


@dataclass
class SweepResult:
    linerr: dict = field(default_factory=dict)      # (sample, param, tau) -> array over p
    recon: dict = field(default_factory=dict)       # (sample, param, variant) -> array over p
    prior_norm: dict = field(default_factory=dict)  # sample -> sqrt(pi/M) E||kappa||
    failures: list = field(default_factory=list)
    files: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)


def sweep(config: ExperimentConfig | dict, out_dir=None, setting: Setting | None = None, progress=None) -> SweepResult:
    """Run the configured studies and write CSV tables under ``out_dir``.

    Tables: ``linerr.csv`` (sample, parametrization, p, tau, e),
    ``recon.csv`` (sample, parametrization, variant, p, tau, lam, iota),
    ``trends.csv`` (monotone-trend flag per curve), snapshot reconstructions
    ``snapshots_<sample>.csv`` and ``manifest.json``.  A member whose solves
    fail is skipped and recorded; more than ``max_skip_fraction`` skipped
    members raises :class:`SweepFailure` after the partial tables are written.
    """
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    t_start = time.time()
    est = cfg.estimated_seconds()
    if est > LONG_RUNNING_SECONDS:
        logger.warning("configuration is long-running: estimated %.1f h on one core", est / 3600)
    setting = setting or Setting(cfg.mesh_n, cfg.cells, cfg.perturb_jitter, cfg.seed, cfg.j_max)
    res = SweepResult()
    lin_rows, rec_rows = [], []
    snapshot_rows = {}
    if cfg.snapshot_p:
        snap_idx = {int(np.argmin(np.abs(np.array(cfg.p_grid) - q))) for q in cfg.snapshot_p}
    else:
        snap_idx = {0, int(np.argmin(np.abs(np.array(cfg.p_grid) - 2.0))), len(cfg.p_grid) - 1}

    for sample in cfg.samples:
        model = sample_config(sample, setting.ref_partition)
        kappas = sample_logconductivity(model, cfg.n_members, member_seed(cfg.seed, _TAG_SAMPLE, sample))
        res.prior_norm[sample] = normalized_norm(kappas)

        if cfg.study in ("linerr", "both"):
            for p in cfg.p_grid:
                for tau in cfg.taus:
                    setting.operators(p, tau)

            def work(k):
                out = _linerr_member(setting, cfg, kappas[k])
                if progress:
                    progress("linerr", sample, k)
                return out

            results = _run_members(work, cfg.n_members, cfg.threads)
            ok = [r for r in results if not isinstance(r, Exception)]
            for k, r in enumerate(results):
                if isinstance(r, Exception):
                    res.failures.append(dict(study="linerr", sample=sample, member=k, error=repr(r)))
            arr = np.mean(np.array(ok), axis=0) if ok else np.full(
                (len(cfg.taus), len(cfg.p_grid), len(cfg.parametrizations)), np.nan)
            for it, tau in enumerate(cfg.taus):
                for ik, par in enumerate(cfg.parametrizations):
                    res.linerr[(sample, par, tau)] = arr[it, :, ik]
                    for ip, p in enumerate(cfg.p_grid):
                        lin_rows.append([sample, par, p, tau, float(arr[it, ip, ik]), len(ok),
                                         cfg.n_members - len(ok)])

        if cfg.study in ("recon", "both"):
            variants = ["correct"] + (["p2"] if cfg.misspecified else [])
            tau = cfg.taus[0]
            ops = {"variants": variants}
            op_ps = sorted(set(cfg.p_grid) | ({2.0} if cfg.misspecified else set()))
            for op_p in op_ps:
                for par in cfg.parametrizations:
                    mean, cov = prior_for(par, op_p, model.Sigma)
                    ops[(op_p, par)] = MapOperator(setting.jacobian(par, op_p, tau), mean, cov, cfg.lam,
                                                   base_point(par), cfg.penalty)
            snap_members = set(range(min(cfg.snapshots, cfg.n_members)))

            def work(k):
                out = _recon_member(setting, cfg, kappas[k], member_seed(cfg.seed, _TAG_NOISE, sample, k), ops,
                                    snap_idx if k in snap_members else set())
                if progress:
                    progress("recon", sample, k)
                return out

            results = _run_members(work, cfg.n_members, cfg.threads)
            ok = []
            for k, r in enumerate(results):
                if isinstance(r, Exception):
                    res.failures.append(dict(study="recon", sample=sample, member=k, error=repr(r)))
                    continue
                ok.append(r)
                for (p, par), kr in r[2].items():
                    snapshot_rows.setdefault(sample, []).append([k, "reco", par, p, *kr.tolist()])
                if k in snap_members:
                    snapshot_rows.setdefault(sample, []).append([k, "target", "", "", *kappas[k].tolist()])
            shape = (len(variants), len(cfg.p_grid), len(cfg.parametrizations))
            err = np.mean([r[0] for r in ok], axis=0) if ok else np.full(shape, np.nan)
            clips = np.sum([r[1] for r in ok], axis=0) if ok else np.zeros(shape, int)
            for iv, variant in enumerate(variants):
                for ik, par in enumerate(cfg.parametrizations):
                    res.recon[(sample, par, variant)] = err[iv, :, ik]
                    for ip, p in enumerate(cfg.p_grid):
                        rec_rows.append([sample, par, variant, p, tau, cfg.lam, float(err[iv, ip, ik]),
                                         len(ok), cfg.n_members - len(ok), int(clips[iv, ip, ik])])

    res.manifest = dict(
        schema_version=SCHEMA_VERSION,
        config=cfg.to_dict(),
        mesh=setting.digests(),
        n_cells=setting.n_cells,
        solver=asdict(setting.opts),
        prior_norm=res.prior_norm,
        failures=res.failures,
        estimated_seconds=est,
        long_running=est > LONG_RUNNING_SECONDS,
        elapsed_seconds=round(time.time() - t_start, 3),
    )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        if lin_rows:
            path = os.path.join(out_dir, "linerr.csv")
            _write_table(path, ["sample", "parametrization", "p", "tau", "e", "n_members", "n_skipped"], lin_rows)
            res.files.append(path)
        if rec_rows:
            path = os.path.join(out_dir, "recon.csv")
            _write_table(path, ["sample", "parametrization", "variant", "p", "tau", "lam", "iota", "n_members",
                                "n_skipped", "n_clipped"], rec_rows)
            res.files.append(path)
        trend_rows = [[*key, "e", int(non_increasing(v, 1))] for key, v in res.linerr.items()]
        trend_rows += [[*key, "iota", int(non_increasing(v, 1))] for key, v in res.recon.items()]
        if trend_rows:
            path = os.path.join(out_dir, "trends.csv")
            _write_table(path, ["sample", "parametrization", "tau_or_variant", "quantity", "non_increasing"],
                         trend_rows)
            res.files.append(path)
        for sample, rows in snapshot_rows.items():
            path = os.path.join(out_dir, f"snapshots_{sample}.csv")
            _write_table(path, ["member", "kind", "parametrization", "p"]
                         + [f"cell{i}" for i in range(setting.n_cells)], rows)
            res.files.append(path)
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(res.manifest, fh, indent=2, sort_keys=True, default=str)
    for study in ("linerr", "recon"):
        for sample in cfg.samples:
            n_fail = sum(1 for f in res.failures if f["study"] == study and f["sample"] == sample)
            if n_fail > cfg.max_skip_fraction * cfg.n_members:
                raise SweepFailure(f"{n_fail} of {cfg.n_members} members failed in {study} for sample {sample}")
    return res
