"""Derivative problem of the forward map and Jacobian assembly.

For a converged forward solution u the derivative u' in the direction eta of
the parameter x solves

    sum_T sigma_T |T| H(grad u_T) grad u'_T . grad v_T
        = - sum_T eta_T w_T |T| Dphi(grad u_T) . grad v_T

with w = dsigma/dx: 1 for sigma itself, sigma**(1-r)/r for x = sigma**r and
sigma for x = log sigma.  The tangent matrix is the Newton tangent of the
forward solver, so one factorization per current serves every direction.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .energy import EnergyParams
from .errors import MeshMismatch
from .forward import (
    BoundaryCurrent,
    ConductivityField,
    NodalField,
    SolverOptions,
    _Problem,
    _weights,
    fem_space,
    power_exponent,
    solve_currents,
)
from .measurement import MeasurementVector, basis_labels, projection_matrix
from .mesh import Partition


def parameter_weight(sigma_cells, parametrization: str, p: float | None = None) -> np.ndarray:
    """dsigma/dx per cell for the given parametrization."""
    sigma_cells = np.asarray(sigma_cells, dtype=float)
    if parametrization == "std":
        return np.ones_like(sigma_cells)
    if parametrization == "exp":
        return sigma_cells.copy()
    r = power_exponent(parametrization, p)
    return sigma_cells ** (1.0 - r) / r


def _flux_local(space, sigma_tri, params: EnergyParams, u):
    """Per-triangle |T| G_T Dphi(grad u_T), shape (n_tri, 3)."""
    g = space.gradients(u)
    a, _, _ = _weights(g, params.p, params.tau)
    Gg = np.einsum("tkd,td->tk", space.G, g)
    return (space.area * a)[:, None] * Gg


def _rhs_matrix(space, partition: Partition, flux_local, w_cells):
    """Sparse (n_free, M) matrix whose column i is the assembled right-hand
    side for eta = indicator of cell i."""
    cell = partition.cell_of_triangle
    vals = -(w_cells[cell])[:, None] * flux_local
    rows = space.reduced_index[space.mesh.triangles].ravel()
    cols = np.repeat(cell, 3)
    keep = rows >= 0
    R = sp.csc_matrix(
        (vals.ravel()[keep], (rows[keep], cols[keep])), shape=(space.n_free, partition.n_cells)
    )
    return R


def solve_derivative(
    sigma: ConductivityField,
    u_sigma: NodalField,
    eta,
    params: EnergyParams,
    parametrization: str | None = None,
    opts: SolverOptions | None = None,
) -> NodalField:
    """Derivative of the solution in direction ``eta`` (M cell values).

    ``parametrization`` defaults to that of ``sigma`` and selects the weight
    dsigma/dx on the right-hand side.
    """
    opts = opts or SolverOptions()
    if u_sigma.mesh is not sigma.mesh:
        raise MeshMismatch("forward solution and conductivity live on different meshes")
    parametrization = parametrization or sigma.parametrization
    partition = sigma.partition
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (partition.n_cells,):
        raise MeshMismatch(f"direction must have {partition.n_cells} cell values")
    space = fem_space(sigma.mesh)
    if not np.any(eta):
        return NodalField(np.zeros(space.n), sigma.mesh)
    s_cells = sigma.to_sigma()
    sigma_tri = partition.triangle_values(s_cells)
    w = parameter_weight(s_cells, parametrization, params.p)
    prob = _Problem(space, sigma_tri, params, np.zeros(space.n), opts.eps_reg)
    fac = prob.tangent_factor(u_sigma.values)
    flux = _flux_local(space, sigma_tri, params, u_sigma.values)
    rhs = space.scatter(-((eta * w)[partition.cell_of_triangle])[:, None] * flux)
    return NodalField(space.expand(fac.solve(rhs[space.free])), sigma.mesh)


@dataclass(eq=False)
class JacobianMatrix:
    """Dense sensitivity matrix, rows in measurement layout, columns cells."""

    entries: np.ndarray
    p: float
    tau: float
    parametrization: str
    base: float
    mesh_digest: str
    j_max: int = 8
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.entries.shape

    def metadata(self) -> dict:
        return dict(
            p=self.p,
            tau=self.tau,
            parametrization=self.parametrization,
            base=self.base,
            mesh=self.mesh_digest,
            j_max=self.j_max,
            **self.meta,
        )

    def save(self, path):
        """``.npz`` (binary) or anything else as CSV with a ``#`` metadata line."""
        path = str(path)
        if path.endswith(".npz"):
            np.savez(path, entries=self.entries, metadata=json.dumps(self.metadata()))
        else:
            np.savetxt(path, self.entries, delimiter=",", header=json.dumps(self.metadata()))

    @classmethod
    def load(cls, path):
        path = str(path)
        if path.endswith(".npz"):
            with np.load(path) as z:
                entries = z["entries"]
                meta = json.loads(str(z["metadata"]))
        else:
            with open(path) as fh:
                meta = json.loads(fh.readline().lstrip("#").strip())
            entries = np.loadtxt(path, delimiter=",", ndmin=2)
        known = {k: meta.pop(k) for k in ("p", "tau", "parametrization", "base", "mesh", "j_max")}
        return cls(entries, known["p"], known["tau"], known["parametrization"], known["base"],
                   known["mesh"], known["j_max"], meta)

    def row_labels(self):
        labels = basis_labels(self.j_max)
        return [f"cur={c},coef={k}" for c in labels for k in labels]


def assemble_jacobian(
    sigma0: ConductivityField,
    params: EnergyParams,
    currents: list[BoundaryCurrent],
    partition: Partition | None = None,
    parametrization: str | None = None,
    opts: SolverOptions | None = None,
    solutions=None,
    j_max: int | None = None,
):
    """Jacobian of the stacked trace projections with respect to the cell
    parameters, column i from the direction eta = indicator of cell i.

    The forward solutions may be passed in ``solutions``; otherwise they are
    computed.  Returns ``(JacobianMatrix, U0)`` where ``U0`` is the stacked
    measurement at ``sigma0``.
    """
    opts = opts or SolverOptions()
    partition = partition or sigma0.partition
    if partition is not sigma0.partition:
        raise MeshMismatch("partition differs from the one carrying sigma0")
    parametrization = parametrization or sigma0.parametrization
    if j_max is None:
        j_max = len(currents) // 2
    space = fem_space(sigma0.mesh)
    if solutions is None:
        solutions = solve_currents(sigma0, params, currents, opts)
    s_cells = sigma0.to_sigma()
    sigma_tri = partition.triangle_values(s_cells)
    w = parameter_weight(s_cells, parametrization, params.p)
    P = projection_matrix(sigma0.mesh.n_boundary, j_max)
    bnd_red = space.reduced_index[sigma0.mesh.boundary]
    if np.any(bnd_red < 0):
        raise MeshMismatch("gauge node must not lie on the boundary")
    prob = _Problem(space, sigma_tri, params, np.zeros(space.n), opts.eps_reg)
    n_coef = 2 * j_max
    J = np.empty((len(currents) * n_coef, partition.n_cells))
    U0 = np.empty(len(currents) * n_coef)
    for k, u in enumerate(solutions):
        fac = prob.tangent_factor(u.values)
        R = _rhs_matrix(space, partition, _flux_local(space, sigma_tri, params, u.values), w)
        D = fac.solve(R.toarray())
        J[k * n_coef:(k + 1) * n_coef] = P @ D[bnd_red]
        U0[k * n_coef:(k + 1) * n_coef] = P @ u.trace()
    # base point recorded as the common parameter value, NaN if not homogeneous
    x0 = sigma0.values if sigma0.parametrization == parametrization else None
    base = float(x0[0]) if x0 is not None and np.all(x0 == x0[0]) else float("nan")
    jac = JacobianMatrix(J, params.p, params.tau, parametrization, base, sigma0.mesh.digest, j_max)
    return jac, MeasurementVector(U0, j_max)
