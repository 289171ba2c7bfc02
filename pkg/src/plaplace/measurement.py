"""Trigonometric input currents, trace projection and measurement vectors.

Layout of a measurement vector for ``j_max`` frequencies: currents in the
order cos1, sin1, cos2, sin2, ..., cos j_max, sin j_max; for each current the
trace coefficients in the same order.  Entry ``k * 2 j_max + l`` is
coefficient ``l`` of the trace produced by current ``k``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .energy import EnergyParams
from .errors import AliasingError
from .forward import BoundaryCurrent, ConductivityField, SolverOptions, solve_currents
from .mesh import MeshGeometry


def basis_labels(j_max: int) -> list[str]:
    return [f"{kind}{j}" for j in range(1, j_max + 1) for kind in ("cos", "sin")]


def trig_basis(angles, j_max: int) -> np.ndarray:
    """Rows cos(j theta), sin(j theta) for j = 1..j_max, shape (2 j_max, len(angles))."""
    j = np.arange(1, j_max + 1)[:, None]
    rows = np.empty((2 * j_max, len(angles)))
    rows[0::2] = np.cos(j * angles)
    rows[1::2] = np.sin(j * angles)
    return rows


def trig_currents(mesh: MeshGeometry, j_max: int = 8) -> list[BoundaryCurrent]:
    """The ``2 j_max`` currents cos(j theta), sin(j theta), j = 1..j_max."""
    if j_max < 1:
        raise ValueError("j_max must be >= 1")
    if 2 * j_max > mesh.n_boundary / 4:
        raise AliasingError(f"2*j_max={2 * j_max} exceeds a quarter of {mesh.n_boundary} boundary nodes")
    rows = trig_basis(mesh.boundary_angles, j_max)
    out = []
    for k, label in enumerate(basis_labels(j_max)):
        out.append(BoundaryCurrent(rows[k], label[:3], int(label[3:])))
    return out


def projection_matrix(n_boundary: int, j_max: int) -> np.ndarray:
    """Trapezoid L2 projection onto the zero-mean basis: coefficient of
    cos(j theta) is (1/pi) int trace cos(j theta) dtheta."""
    angles = 2 * np.pi * np.arange(n_boundary) / n_boundary
    return trig_basis(angles, j_max) * (2.0 / n_boundary)


def project_trace(trace, j_max: int) -> np.ndarray:
    """Coefficients of boundary values (ordered by angle) in the zero-mean
    trigonometric basis; the constant mode is discarded.  ``trace`` may carry
    leading axes."""
    trace = np.asarray(trace, dtype=float)
    P = projection_matrix(trace.shape[-1], j_max)
    return trace @ P.T


@dataclass
class MeasurementVector:
    values: np.ndarray
    j_max: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)

    def __len__(self):
        return len(self.values)

    def as_matrix(self) -> np.ndarray:
        """Shape (n_currents, n_coefficients)."""
        return self.values.reshape(2 * self.j_max, 2 * self.j_max)

    def slot_labels(self) -> list[str]:
        labels = basis_labels(self.j_max)
        return [f"cur={c},coef={k}" for c in labels for k in labels]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.slot_labels())
            w.writerow([repr(float(v)) for v in self.values])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        values = np.array([float(v) for v in rows[1]])
        j_max = int(round(np.sqrt(len(values)) / 2))
        return cls(values, j_max)


def measure_solutions(solutions, j_max: int) -> MeasurementVector:
    traces = np.array([u.trace() for u in solutions])
    return MeasurementVector(project_trace(traces, j_max).ravel(), j_max)


def simulate_measurement(
    field: ConductivityField,
    params: EnergyParams,
    j_max: int = 8,
    opts: SolverOptions | None = None,
    initial=None,
    return_solutions: bool = False,
):
    """Forward solves for all ``2 j_max`` trigonometric currents, projected and
    stacked.  With ``return_solutions`` the nodal solutions are returned too
    (useful as warm starts for a nearby ``p``)."""
    currents = trig_currents(field.mesh, j_max)
    sols = solve_currents(field, params, currents, opts, initial)
    U = measure_solutions(sols, j_max)
    return (U, sols) if return_solutions else U


def add_noise(U: MeasurementVector, lam: float, rng_seed=None) -> MeasurementVector:
    """Add i.i.d. N(0, lam^2) noise to every coefficient.

    ``rng_seed`` may be an int, a sequence of ints (e.g. ``[seed, member]``)
    or a numpy Generator; the same seed yields the same noise vector, which
    is how noise is kept fixed across values of p for one target.
    """
    if lam < 0:
        raise ValueError("noise level must be >= 0")
    if lam == 0:
        return MeasurementVector(U.values.copy(), U.j_max)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return MeasurementVector(U.values + lam * rng.standard_normal(len(U.values)), U.j_max)
