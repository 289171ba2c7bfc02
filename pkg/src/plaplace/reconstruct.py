"""One-step linearized MAP reconstruction and conversion to log-conductivity.

The estimate minimizes

    ||V - U0 - J (x - x0)||^2 + gamma lam^2 (x - xbar)^T Sigma^{-1} (x - xbar)

for a Gaussian prior N(xbar, Sigma).  It is evaluated in the equivalent
data-space form

    x = xbar + Sigma J^T (J Sigma J^T + gamma lam^2 I)^{-1} (V - U0 - J (xbar - x0))

which never inverts Sigma.  Squared-exponential covariances with long
correlation lengths are numerically singular, while the data-space matrix is
only as large as the measurement vector and is SPD for every lam > 0.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import IllConditioned, NonPositiveReconstruction
from .forward import base_point

logger = logging.getLogger(__name__)

COND_LIMIT = 1e14


def _values(a):
    return np.asarray(getattr(a, "values", getattr(a, "entries", a)), dtype=float)


@dataclass(eq=False)
class MapOperator:
    """Precomputed gain for repeated reconstructions with one Jacobian,
    prior and noise level.

    ``x = xbar + gain @ (V - U0 - J (xbar - x0))``; ``gain`` is shared
    read-only across members.
    """

    J: np.ndarray
    prior_mean: np.ndarray
    prior_cov: np.ndarray
    lam: float
    x0: np.ndarray
    penalty: float = 1.0

    def __post_init__(self):
        self.J = _values(self.J)
        n_cells = self.J.shape[1]
        self.prior_mean = np.broadcast_to(np.asarray(self.prior_mean, dtype=float), (n_cells,)).copy()
        self.x0 = np.broadcast_to(np.asarray(self.x0, dtype=float), (n_cells,)).copy()
        self.prior_cov = np.asarray(self.prior_cov, dtype=float)
        if self.lam <= 0 or self.penalty <= 0:
            raise ValueError("lambda and the penalty multiplier must be positive")
        self.reg = self.penalty * self.lam**2
        SJt = self.prior_cov @ self.J.T
        S = self.J @ SJt
        S = 0.5 * (S + S.T) + self.reg * np.eye(S.shape[0])
        ev = np.linalg.eigvalsh(S)
        self.condition = float(ev[-1] / ev[0]) if ev[0] > 0 else np.inf
        if not self.condition <= COND_LIMIT:
            raise IllConditioned(
                f"data-space matrix has condition {self.condition:.2e} > {COND_LIMIT:.0e}; increase lambda"
            )
        cf = sla.cho_factor(S, lower=True, check_finite=False)
        self.gain = sla.cho_solve(cf, SJt.T, check_finite=False).T
        self.offset = self.J @ (self.prior_mean - self.x0)

    def __call__(self, V, U0) -> np.ndarray:
        d = _values(V) - _values(U0) - self.offset
        return self.prior_mean + self.gain @ d

    def stationarity(self, x, V, U0) -> float:
        """Relative norm of the gradient condition multiplied by Sigma,
        ``Sigma J^T r = reg (x - xbar)`` with r the linearized residual."""
        r = _values(V) - _values(U0) - self.J @ (x - self.x0)
        lhs = self.prior_cov @ (self.J.T @ r)
        rhs = self.reg * (x - self.prior_mean)
        scale = max(np.linalg.norm(lhs), np.linalg.norm(rhs), np.finfo(float).tiny)
        return float(np.linalg.norm(lhs - rhs) / scale)


def one_step_map(V, J, U0, prior_mean, prior_cov, lam: float, x0=None, penalty: float = 1.0) -> np.ndarray:
    """Minimizer of the linearized data misfit plus Gaussian prior penalty.

    ``x0`` defaults to the homogeneous base point of the Jacobian's
    parametrization (0 for log-conductivity, 1 otherwise).  Raises
    :class:`IllConditioned` if the condition number of the data-space
    system exceeds 1e14.
    """
    if x0 is None:
        x0 = base_point(getattr(J, "parametrization", "std"))
    return MapOperator(J, prior_mean, prior_cov, lam, x0, penalty)(V, U0)


def map_objective(x, V, J, U0, prior_mean, prior_cov, lam: float, x0, penalty: float = 1.0) -> float:
    """Value of the MAP objective; needs Sigma to be invertible."""
    J = _values(J)
    r = _values(V) - _values(U0) - J @ (x - x0)
    dx = x - prior_mean
    w = sla.solve(prior_cov, dx, assume_a="pos")
    return float(r @ r + penalty * lam**2 * dx @ w)


def clip_mask(x, parametrization: str, floor: float = 1e-6) -> np.ndarray:
    """Cells whose value is below ``floor`` in a positive parametrization."""
    x = np.asarray(x, dtype=float)
    if parametrization == "exp":
        return np.zeros(x.shape, bool)
    return x < floor


def to_log_conductivity(x, parametrization: str, p: float | None = None, floor: float = 1e-6, strict: bool = False):
    """Log-conductivity of a cell vector in any parametrization.

    std: log x, inv: -log x, nat: (1 - p) log x, exp: x.  Non-positive cells
    of the positive parametrizations are raised to ``floor`` and counted in
    the log; with ``strict`` they raise :class:`NonPositiveReconstruction`.
    """
    x = np.asarray(x, dtype=float)
    if parametrization == "exp":
        return x.copy()
    bad = clip_mask(x, parametrization, floor)
    if bad.any():
        if strict:
            raise NonPositiveReconstruction(f"{int(bad.sum())} cells below {floor:g}")
        logger.info("clipped %d of %d cells to %g (%s)", int(bad.sum()), x.size, floor, parametrization)
        x = np.maximum(x, floor)
    if parametrization == "std":
        return np.log(x)
    if parametrization == "inv":
        return -np.log(x)
    if parametrization == "nat":
        if p is None:
            raise ValueError("the natural parametrization needs p")
        return (1.0 - p) * np.log(x)
    raise ValueError(f"unknown parametrization {parametrization!r}")


def from_log_conductivity(kappa, parametrization: str, p: float | None = None) -> np.ndarray:
    """Inverse of :func:`to_log_conductivity` on positive values."""
    kappa = np.asarray(kappa, dtype=float)
    if parametrization == "exp":
        return kappa.copy()
    if parametrization == "std":
        return np.exp(kappa)
    if parametrization == "inv":
        return np.exp(-kappa)
    if parametrization == "nat":
        if p is None:
            raise ValueError("the natural parametrization needs p")
        return np.exp(kappa / (1.0 - p))
    raise ValueError(f"unknown parametrization {parametrization!r}")


def save_reconstruction(path, x, manifest: dict | None = None):
    """Cell vector as CSV, plus ``<path>.json`` with the run manifest."""
    x = np.atleast_2d(x)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"cell{i}" for i in range(x.shape[1])])
        for row in x:
            w.writerow([repr(float(v)) for v in row])
    if manifest is not None:
        with open(f"{path}.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
