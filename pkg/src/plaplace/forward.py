"""Piecewise-linear finite elements for the weighted, smoothed p-Laplace
Neumann problem

    find u with  sum_T sigma_T |T| Dphi(grad u_T) . grad v_T = int_{dOmega} f v dS

for all test functions v, solved by a damped Newton iteration that starts
from the linear (p = 2) solution.  Gradients are constant per triangle, so the
domain integrals are exact; the boundary integral uses the trapezoid rule on
the uniformly spaced boundary nodes.  The additive constant is fixed by
pinning the gauge node (see :attr:`MeshGeometry.gauge_node`) to zero.
"""
from __future__ import annotations

import logging
import math
import weakref
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee
from scipy.sparse.linalg import splu

from .energy import EnergyParams
from .errors import MeshMismatch, NewtonDivergence, SingularTangent
from .mesh import MeshGeometry, Partition

logger = logging.getLogger(__name__)

PARAMETRIZATIONS = ("std", "inv", "nat", "exp")


def power_exponent(parametrization: str, p: float | None = None) -> float:
    """Exponent r with x = sigma**r (std 1, inv -1, nat -q/p = -1/(p-1))."""
    if parametrization == "std":
        return 1.0
    if parametrization == "inv":
        return -1.0
    if parametrization == "nat":
        if p is None:
            raise ValueError("the natural parametrization needs p")
        return -1.0 / (p - 1.0)
    raise ValueError(f"no power exponent for parametrization {parametrization!r}")


def base_point(parametrization: str) -> float:
    """Parameter value of the homogeneous coefficient sigma = 1."""
    return 0.0 if parametrization == "exp" else 1.0


@dataclass(eq=False)
class ConductivityField:
    """Cell-wise coefficient in one of four parametrizations.

    ``std`` holds sigma, ``inv`` the resistivity 1/sigma, ``nat`` the natural
    power sigma**(-q/p) (which needs ``p``) and ``exp`` the log-conductivity.
    """

    values: np.ndarray
    parametrization: str
    partition: Partition
    p: float | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.parametrization not in PARAMETRIZATIONS:
            raise ValueError(f"unknown parametrization {self.parametrization!r}")
        if self.values.shape != (self.partition.n_cells,):
            raise MeshMismatch(f"expected {self.partition.n_cells} cell values, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("coefficient values must be finite")
        if self.parametrization != "exp" and np.any(self.values <= 0):
            raise ValueError(f"{self.parametrization} values must be strictly positive")
        if self.parametrization == "nat" and self.p is None:
            raise ValueError("the natural parametrization needs p")

    @classmethod
    def from_log(cls, kappa, parametrization, partition, p=None):
        kappa = np.asarray(kappa, dtype=float)
        if parametrization == "exp":
            return cls(kappa, "exp", partition, p)
        r = power_exponent(parametrization, p)
        return cls(np.exp(r * kappa), parametrization, partition, p)

    @classmethod
    def constant(cls, value, partition, parametrization="std", p=None):
        return cls(np.full(partition.n_cells, float(value)), parametrization, partition, p)

    def to_sigma(self) -> np.ndarray:
        if self.parametrization == "exp":
            return np.exp(self.values)
        r = power_exponent(self.parametrization, self.p)
        return self.values ** (1.0 / r)

    def to_log(self) -> np.ndarray:
        return np.log(self.to_sigma())

    def on_triangles(self) -> np.ndarray:
        return self.partition.triangle_values(self.to_sigma())

    @property
    def mesh(self) -> MeshGeometry:
        return self.partition.mesh


@dataclass(eq=False)
class NodalField:
    values: np.ndarray
    mesh: MeshGeometry
    newton_steps: int = 0
    residual: float = 0.0
    diagnostics: list = field(default_factory=list, repr=False)

    @property
    def gauge_node(self) -> int:
        return self.mesh.gauge_node

    def trace(self) -> np.ndarray:
        """Boundary values ordered by angle."""
        return self.values[self.mesh.boundary]

    def save(self, path):
        np.savetxt(path, self.values, header=f"nodal values mesh={self.mesh.digest} gauge={self.gauge_node}")


@dataclass(eq=False)
class BoundaryCurrent:
    """Boundary current density sampled at the boundary nodes."""

    samples: np.ndarray
    kind: str = "custom"
    frequency: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        scale = np.max(np.abs(self.samples)) if self.samples.size else 0.0
        mean = self.samples.mean() if self.samples.size else 0.0
        if abs(mean) > 1e-10 * max(scale, 1.0):
            raise ValueError(f"boundary current must have zero mean, mean={mean:.3e}")

    @property
    def label(self) -> str:
        return f"{self.kind}{self.frequency}" if self.kind in ("cos", "sin") else self.kind

    def scaled(self, s: float) -> "BoundaryCurrent":
        return BoundaryCurrent(s * self.samples, self.kind, self.frequency)


@dataclass
class SolverOptions:
    tol: float = 1e-10               # residual norm relative to load norm
    max_steps: int = 50
    max_halvings: int = 30
    continuation_trigger: float = 0.75  # |p - 2| above which intermediate p-steps are taken
    continuation_step_below: float = 0.25  # largest p-step for p < 2, where Newton stalls longer
    continuation_tol: float = 1e-6
    eps_reg: float = 1e-12           # gradient floor for the tangent at tau = 0


# ---------------------------------------------------------------------------
# Assembly machinery, cached per mesh
# ---------------------------------------------------------------------------

class FEMSpace:
    """P1 basis data and the sparsity pattern of the gauge-reduced system."""

    def __init__(self, mesh: MeshGeometry):
        self.mesh = mesh
        X = mesh.nodes
        t = mesh.triangles
        a, b, c = X[t[:, 0]], X[t[:, 1]], X[t[:, 2]]
        area = mesh.areas
        # gradient of the barycentric basis functions, (n_tri, 3, 2)
        G = np.empty((len(t), 3, 2))
        G[:, 0] = np.stack([b[:, 1] - c[:, 1], c[:, 0] - b[:, 0]], -1)
        G[:, 1] = np.stack([c[:, 1] - a[:, 1], a[:, 0] - c[:, 0]], -1)
        G[:, 2] = np.stack([a[:, 1] - b[:, 1], b[:, 0] - a[:, 0]], -1)
        G /= (2.0 * area)[:, None, None]
        self.G = G
        self.area = area
        self.GG = np.einsum("tkd,tld->tkl", G, G)
        self.n = mesh.n_nodes
        self.gauge = mesh.gauge_node
        free = np.ones(self.n, bool)
        free[self.gauge] = False
        self.free = np.flatnonzero(free)
        red = np.full(self.n, -1)
        red[self.free] = np.arange(len(self.free))
        self.reduced_index = red
        self.n_free = len(self.free)

        rows = red[np.repeat(t, 3, axis=1)].ravel()
        cols = red[np.tile(t, (1, 3))].ravel()
        keep = (rows >= 0) & (cols >= 0)
        key = rows[keep] * self.n_free + cols[keep]
        uniq, inv = np.unique(key, return_inverse=True)
        self._keep = keep
        self._slot = inv
        self._nnz = len(uniq)
        r_u, c_u = np.divmod(uniq, self.n_free)
        # CSC pattern: sort by column then row
        order = np.lexsort((r_u, c_u))
        pos = np.empty_like(order)
        pos[order] = np.arange(len(order))
        self._slot = pos[self._slot]
        self._indices = r_u[order].astype(np.int32)
        self._indptr = np.concatenate([[0], np.cumsum(np.bincount(c_u, minlength=self.n_free))]).astype(np.int32)
        self.boundary_weight = 2.0 * np.pi / mesh.n_boundary
        self.tri_flat = t.ravel()
        self._setup_band(r_u, c_u, order)

    def _setup_band(self, r_u, c_u, order):
        """Reverse Cuthill-McKee ordering and the lower band storage used by
        the banded Cholesky path."""
        pattern = sp.csr_matrix((np.ones(len(r_u)), (r_u, c_u)), shape=(self.n_free, self.n_free))
        perm = reverse_cuthill_mckee(pattern, symmetric_mode=True)
        rank = np.empty_like(perm)
        rank[perm] = np.arange(len(perm))
        # CSC slot k holds entry (row, col) = (r_u[order][k], c_u[order][k])
        pr, pc = rank[r_u[order]], rank[c_u[order]]
        self.bandwidth = int(np.max(np.abs(pr - pc))) if len(pr) else 0
        self.perm = perm
        lower = pr >= pc
        self._band_slot_mask = lower
        self._band_pos = (pr - pc)[lower] * self.n_free + pc[lower]
        self.use_band = self.bandwidth <= BAND_LIMIT

    def factor(self, local):
        """SPD factorization of the reduced matrix assembled from local blocks."""
        data = np.bincount(self._slot, weights=local.reshape(-1)[self._keep], minlength=self._nnz)
        return self.factor_data(data)

    def factor_data(self, data):
        if not self.use_band:
            A = sp.csc_matrix((data, self._indices, self._indptr), shape=(self.n_free, self.n_free))
            return factorize(A)
        ab = np.zeros((self.bandwidth + 1) * self.n_free)
        ab[self._band_pos] = data[self._band_slot_mask]
        ab = ab.reshape(self.bandwidth + 1, self.n_free)
        try:
            c = sla.cholesky_banded(ab, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise SingularTangent(str(exc)) from exc
        return BandedCholesky(c, self.perm)

    def gradients(self, u):
        """Per-triangle gradients of nodal field(s); ``u`` of shape (n,) or (k, n)."""
        ut = u[..., self.mesh.triangles]
        return np.einsum("...tk,tkd->...td", ut, self.G)

    def matrix(self, local):
        """Sparse CSC matrix of the gauge-reduced system from local (n_tri, 3, 3) blocks."""
        data = np.bincount(self._slot, weights=local.reshape(-1)[self._keep], minlength=self._nnz)
        return sp.csc_matrix((data, self._indices, self._indptr), shape=(self.n_free, self.n_free))

    def scatter(self, local_vec):
        """Assemble (n_tri, 3) local vectors into a full nodal vector."""
        return np.bincount(self.tri_flat, weights=local_vec.reshape(-1), minlength=self.n)

    def load(self, f: BoundaryCurrent):
        if f.samples.shape != (self.mesh.n_boundary,):
            raise MeshMismatch("boundary current does not match the mesh boundary")
        b = np.zeros(self.n)
        b[self.mesh.boundary] = self.boundary_weight * (f.samples - f.samples.mean())
        return b

    def stiffness_local(self, coef):
        """Local blocks of sum_T coef_T |T| G G^T, the p = 2 operator."""
        return (coef * self.area)[:, None, None] * self.GG

    def stiffness(self, coef):
        return self.matrix(self.stiffness_local(coef))

    def expand(self, u_red):
        u = np.zeros(u_red.shape[:-1] + (self.n,))
        u[..., self.free] = u_red
        return u


# bandwidth up to which the banded Cholesky path beats sparse LU
BAND_LIMIT = 160


class BandedCholesky:
    """Banded Cholesky factor of a symmetrically permuted SPD matrix."""

    def __init__(self, cb, perm):
        self.cb = cb
        self.perm = perm

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        x = sla.cho_solve_banded((self.cb, True), rhs[self.perm], check_finite=False)
        out = np.empty_like(x)
        out[self.perm] = x
        return out


_SPACES: "weakref.WeakKeyDictionary[MeshGeometry, FEMSpace]" = weakref.WeakKeyDictionary()


def fem_space(mesh: MeshGeometry) -> FEMSpace:
    space = _SPACES.get(mesh)
    if space is None:
        space = FEMSpace(mesh)
        _SPACES[mesh] = space
    return space


def factorize(A):
    """Sparse LU of an SPD matrix; raises SingularTangent on breakdown."""
    try:
        lu = splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options=dict(SymmetricMode=True))
    except RuntimeError as exc:
        raise SingularTangent(str(exc)) from exc
    return lu


# ---------------------------------------------------------------------------
# Pointwise kernels in the (tau, gradient) layout used by assembly
# ---------------------------------------------------------------------------

def _weights(g, p, tau, floor=0.0):
    """a = s^((p-2)/2), b = (p-2) s^((p-4)/2) with s = tau^2 + max(|g|^2, floor^2)."""
    gg = np.einsum("...d,...d->...", g, g)
    s = tau * tau + np.maximum(gg, floor * floor)
    if p == 2.0:
        return np.ones_like(s), np.zeros_like(s), gg
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(s > 0, s ** ((p - 2.0) / 2.0), 0.0)
        b = np.where(s > 0, (p - 2.0) * a / s, 0.0)
    return a, b, gg


class _Problem:
    """Residual, tangent and energy of one (sigma, p, tau, f) instance."""

    def __init__(self, space: FEMSpace, sigma_tri, params: EnergyParams, load, eps_reg):
        self.space = space
        self.coef = sigma_tri * space.area
        self.p = params.p
        self.tau = params.tau
        self.load = load
        self.load_red = load[space.free]
        self.eps = eps_reg if params.tau == 0.0 else 0.0

    def energy(self, u):
        g = self.space.gradients(u)
        gg = np.einsum("td,td->t", g, g)
        dens = (self.tau**2 + gg) ** (self.p / 2.0) / self.p
        return float(self.coef @ dens - self.load @ u)

    def residual(self, u):
        g = self.space.gradients(u)
        a, _, _ = _weights(g, self.p, self.tau)
        Gg = np.einsum("tkd,td->tk", self.space.G, g)
        r = self.space.scatter((self.coef * a)[:, None] * Gg) - self.load
        return r[self.space.free]

    def tangent_local(self, u):
        g = self.space.gradients(u)
        a, b, _ = _weights(g, self.p, self.tau, self.eps)
        Gg = np.einsum("tkd,td->tk", self.space.G, g)
        return (self.coef * a)[:, None, None] * self.space.GG + (self.coef * b)[:, None, None] * (
            Gg[:, :, None] * Gg[:, None, :]
        )

    def tangent(self, u):
        return self.space.matrix(self.tangent_local(u))

    def tangent_factor(self, u):
        return self.space.factor(self.tangent_local(u))


def _newton(prob: _Problem, u, tol, opts: SolverOptions, log_prefix=""):
    """Damped Newton iteration with backtracking on the energy.

    A step is accepted when it satisfies the Armijo condition on the energy.
    Once energy differences fall to rounding level the step is accepted on a
    decrease of the residual norm instead.
    """
    space = prob.space
    ref = np.linalg.norm(prob.load_red)
    if ref == 0.0:
        return np.zeros(space.n), 0, 0.0, []
    r = prob.residual(u)
    rn = np.linalg.norm(r)
    E = prob.energy(u)
    history = [(0, rn / ref, 1.0, E)]
    steps = 0
    while rn > tol * ref:
        if steps >= opts.max_steps:
            raise NewtonDivergence(f"no convergence in {opts.max_steps} Newton steps (residual {rn / ref:.2e})")
        d_red = prob.tangent_factor(u).solve(-r)
        d = space.expand(d_red)
        slope = float(r @ d_red)
        scale = abs(E) + abs(prob.load @ u) + 1e-300
        t = 1.0
        for _ in range(opts.max_halvings + 1):
            u_new = u + t * d
            E_new = prob.energy(u_new)
            if E_new <= E + 1e-4 * t * slope:
                r_new = prob.residual(u_new)
                break
            if abs(E_new - E) <= 64 * np.finfo(float).eps * scale:
                r_new = prob.residual(u_new)
                if np.linalg.norm(r_new) < rn:
                    break
            t *= 0.5
        else:
            raise NewtonDivergence(
                f"no acceptable step after {opts.max_halvings} halvings (residual {rn / ref:.2e})"
            )
        u, r, E = u_new, r_new, E_new
        rn = np.linalg.norm(r)
        steps += 1
        history.append((steps, rn / ref, t, E))
        logger.debug("%snewton step=%d residual=%.3e damping=%.3g energy=%.12e", log_prefix, steps, rn / ref, t, E)
    return u, steps, rn / ref, history


def _check_mesh(sigma: ConductivityField, mesh: MeshGeometry):
    if sigma.mesh is not mesh:
        raise MeshMismatch("conductivity partition and field live on different meshes")


def energy(v: NodalField, sigma: ConductivityField, params: EnergyParams, f: BoundaryCurrent) -> float:
    """Discrete p-energy ``sum_T sigma_T |T| phi(grad v_T) - int f v dS``."""
    _check_mesh(sigma, v.mesh)
    space = fem_space(v.mesh)
    prob = _Problem(space, sigma.on_triangles(), params, space.load(f), 0.0)
    return prob.energy(v.values)


def linear_solution(sigma: ConductivityField, loads, factor=None):
    """Solutions of the p = 2 problem for one or several load vectors (rows)."""
    space = fem_space(sigma.mesh)
    if factor is None:
        factor = space.factor(space.stiffness_local(sigma.on_triangles()))
    loads = np.atleast_2d(loads)
    u = factor.solve(np.ascontiguousarray(loads[:, space.free].T)).T
    return space.expand(u), factor


def _rescale(prob: _Problem, u):
    """Energy-optimal multiple of ``u`` for the tau = 0 density."""
    g = prob.space.gradients(u)
    gg = np.einsum("td,td->t", g, g)
    A = float(prob.coef @ (gg ** (prob.p / 2.0))) / prob.p
    B = float(prob.load @ u)
    if A <= 0 or B <= 0:
        return u
    return (B / (prob.p * A)) ** (1.0 / (prob.p - 1.0)) * u


def _continuation_path(p, trigger, step_below=None):
    if p < 2.0 and step_below is not None:
        trigger = min(trigger, step_below)
    if abs(p - 2.0) <= trigger:
        return [p]
    n = math.ceil(abs(p - 2.0) / trigger - 1e-12)
    return [2.0 + (p - 2.0) * k / n for k in range(1, n + 1)]


def solve_nonlinear(space: FEMSpace, sigma_tri, params: EnergyParams, load, opts: SolverOptions, u_init=None, linear=None):
    """Core solve on raw arrays; returns ``(u, steps, residual, history)``."""
    if params.p == 2.0 or u_init is None:
        if linear is None:
            lin = space.factor(space.stiffness_local(sigma_tri)).solve(load[space.free])
            linear = space.expand(lin)
        if params.p == 2.0:
            # the linear solve is the first Newton step from u = 0
            prob = _Problem(space, sigma_tri, params, load, opts.eps_reg)
            u, steps, res, hist = _newton(prob, linear, opts.tol, opts)
            hist = [(k + 1, r, t, e) for k, r, t, e in hist]
            return u, steps + 1, res, hist
    steps_total = 0
    history = []
    if u_init is not None:
        path = [params.p]
        u = np.array(u_init, dtype=float)
    else:
        path = _continuation_path(params.p, opts.continuation_trigger, opts.continuation_step_below)
        u = linear
    for k, p_k in enumerate(path):
        prm = EnergyParams(p_k, params.tau)
        prob = _Problem(space, sigma_tri, prm, load, opts.eps_reg)
        if u_init is None and k == 0:
            u = _rescale(prob, u)
        tol = opts.tol if k == len(path) - 1 else opts.continuation_tol
        u, steps, res, hist = _newton(prob, u, tol, opts)
        steps_total += steps
        history.extend(hist)
    return u, steps_total, res, history


def solve_forward(
    sigma: ConductivityField,
    params: EnergyParams,
    f: BoundaryCurrent,
    opts: SolverOptions | None = None,
    initial: NodalField | None = None,
) -> NodalField:
    """Solve the discrete Neumann problem for one boundary current.

    The iteration starts from the p = 2 solution, rescaled to minimize the
    energy along its ray, unless ``initial`` supplies a warm start.  The
    returned field has the gauge node pinned to zero and carries the Newton
    step count, the final relative residual and the iteration history
    ``(step, residual, damping, energy)``.
    """
    opts = opts or SolverOptions()
    mesh = sigma.mesh
    space = fem_space(mesh)
    if initial is not None and initial.mesh is not mesh:
        raise MeshMismatch("initial guess lives on a different mesh")
    load = space.load(f)
    u, steps, res, hist = solve_nonlinear(
        space, sigma.on_triangles(), params, load, opts, None if initial is None else initial.values
    )
    return NodalField(u, mesh, steps, res, hist)


def solve_currents(
    sigma: ConductivityField,
    params: EnergyParams,
    currents,
    opts: SolverOptions | None = None,
    initial=None,
):
    """Solve for several boundary currents sharing one p = 2 factorization."""
    opts = opts or SolverOptions()
    space = fem_space(sigma.mesh)
    sigma_tri = sigma.on_triangles()
    loads = np.array([space.load(f) for f in currents])
    linear = None
    if initial is None or params.p == 2.0:
        linear, _ = linear_solution(sigma, loads)
    out = []
    for k, load in enumerate(loads):
        u0 = None if initial is None else initial[k].values
        lin = None if linear is None else linear[k]
        u, steps, res, hist = solve_nonlinear(space, sigma_tri, params, load, opts, u0, lin)
        out.append(NodalField(u, sigma.mesh, steps, res, hist))
    return out
