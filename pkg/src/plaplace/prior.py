"""Gaussian priors on cell-wise log-conductivity and log-normal moments."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.spatial.distance import cdist

from .errors import FactorizationFailure
from .mesh import Partition

logger = logging.getLogger(__name__)

# named prior configurations (pointwise variance, correlation length)
SAMPLE_CONFIGS = {
    "A": (1 / 4, 1 / 3),
    "B": (1 / 4, 2 / 3),
    "C": (1.0, 1 / 3),
    "D": (1.0, 2 / 3),
    "E": (1 / 100, 1 / 3),
    "F": (1 / 100, 2 / 3),
}

MAX_JITTER = 1e-10  # relative to the pointwise variance


@dataclass(eq=False)
class CovarianceModel:
    varsigma2: float
    b: float
    Sigma: np.ndarray
    name: str | None = None

    def __post_init__(self):
        self.Sigma = np.asarray(self.Sigma, dtype=float)
        self._factor = None

    @property
    def n_cells(self) -> int:
        return self.Sigma.shape[0]

    def cholesky(self) -> np.ndarray:
        """Lower Cholesky factor, adding diagonal jitter up to
        ``MAX_JITTER * varsigma2`` when the matrix is numerically singular."""
        if self._factor is None:
            self._factor = jittered_cholesky(self.Sigma, MAX_JITTER * self.varsigma2)
        return self._factor


def jittered_cholesky(S, max_jitter: float) -> np.ndarray:
    n = S.shape[0]
    jitter = 0.0
    while True:
        try:
            L = sla.cholesky(S + jitter * np.eye(n), lower=True, check_finite=False)
            if jitter:
                logger.info("cholesky succeeded with jitter %.3e", jitter)
            return L
        except np.linalg.LinAlgError:
            if jitter >= max_jitter:
                raise FactorizationFailure(f"cholesky failed with jitter up to {max_jitter:.3e}")
            jitter = max_jitter * 1e-6 if jitter == 0.0 else min(10 * jitter, max_jitter)


def squared_exponential(points, varsigma2: float, b: float) -> np.ndarray:
    d2 = cdist(points, points, "sqeuclidean")
    return varsigma2 * np.exp(-d2 / (2.0 * b * b))


def covariance_matrix(partition: Partition, varsigma2: float, b: float, name=None) -> CovarianceModel:
    """Squared-exponential covariance between cell centroids."""
    if varsigma2 <= 0 or b <= 0:
        raise ValueError("varsigma2 and b must be positive")
    return CovarianceModel(varsigma2, b, squared_exponential(partition.centroids, varsigma2, b), name)


def sample_config(name: str, partition: Partition) -> CovarianceModel:
    try:
        v, b = SAMPLE_CONFIGS[name.upper()]
    except KeyError:
        raise ValueError(f"unknown sample {name!r}, expected one of {sorted(SAMPLE_CONFIGS)}") from None
    return covariance_matrix(partition, v, b, name.upper())


def sample_logconductivity(model: CovarianceModel, n: int, rng_seed=None) -> np.ndarray:
    """``n`` independent draws from N(0, Sigma), one member per row.

    Member k is drawn from its own stream seeded by ``(*rng_seed, k)``, so a
    member does not depend on how many others are drawn.  ``rng_seed`` is an
    int or a sequence of ints.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    L = model.cholesky()
    base = [int(v) for v in np.atleast_1d(0 if rng_seed is None else rng_seed)]
    out = np.empty((n, model.n_cells))
    for k in range(n):
        # one matrix-vector product per member keeps rows bitwise independent of n
        out[k] = L @ np.random.default_rng([*base, k]).standard_normal(model.n_cells)
    return out


def normalized_norm(kappa) -> float:
    """sqrt(pi / M) * mean ||kappa||_2 over rows: the unit-disk scaling that
    makes the value comparable to an L2 norm."""
    kappa = np.atleast_2d(kappa)
    M = kappa.shape[1]
    return float(np.sqrt(np.pi / M) * np.mean(np.linalg.norm(kappa, axis=1)))


def lognormal_moments(model: CovarianceModel | np.ndarray, scale: float):
    """Mean and covariance of exp(scale * kappa) for kappa ~ N(0, Sigma)."""
    S = model.Sigma if isinstance(model, CovarianceModel) else np.asarray(model, dtype=float)
    S = scale * scale * S
    d = np.diag(S)
    mean = np.exp(d / 2.0)
    cov = np.exp((d[:, None] + d[None, :]) / 2.0) * np.expm1(S)
    return mean, cov


def save_samples(path, kappa, model: CovarianceModel | None = None, seed=None):
    kappa = np.atleast_2d(kappa)
    with open(path, "w", newline="") as fh:
        if model is not None:
            fh.write(f"# varsigma2={float(model.varsigma2)!r} b={float(model.b)!r} n={len(kappa)} seed={seed}\n")
        w = csv.writer(fh)
        w.writerow([f"cell{i}" for i in range(kappa.shape[1])])
        for row in kappa:
            w.writerow([repr(float(v)) for v in row])


def load_samples(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    return np.array([[float(v) for v in r] for r in rows[1:]], ndmin=2)
