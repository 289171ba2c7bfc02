"""Smoothed p-energy density and its derivatives.

The density is ``phi(x) = (tau**2 + |x|**2)**(p/2) / p`` on R^n.  All kernels
broadcast over leading axes: an input of shape ``(..., n)`` gives scalars of
shape ``(...)``, gradients of shape ``(..., n)`` and Hessians of shape
``(..., n, n)``, which is what the finite element assembly feeds them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InequalityViolation, SingularPoint


@dataclass(frozen=True)
class EnergyParams:
    """Exponent ``p > 1`` and smoothing ``tau >= 0``."""

    p: float
    tau: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.p) or self.p <= 1.0:
            raise ValueError(f"p must be > 1, got {self.p}")
        if not np.isfinite(self.tau) or self.tau < 0.0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")

    @property
    def q(self) -> float:
        """Conjugate exponent p/(p-1)."""
        return self.p / (self.p - 1.0)


def _sq(x):
    x = np.asarray(x, dtype=float)
    return x, np.einsum("...i,...i->...", x, x)


def phi(x, params: EnergyParams):
    x, xx = _sq(x)
    return (params.tau**2 + xx) ** (params.p / 2.0) / params.p


def grad_phi(x, params: EnergyParams, floor: float = 0.0):
    """Gradient ``(tau^2 + |x|^2)^((p-2)/2) x``.

    At the degenerate point ``tau = 0, x = 0`` the continuous limit (zero) is
    returned for every p.  ``floor`` is a lower bound applied to ``|x|`` inside
    the weight only; the forward solver leaves it at zero.
    """
    x, xx = _sq(x)
    s = params.tau**2 + np.maximum(xx, floor**2)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(s > 0.0, s ** ((params.p - 2.0) / 2.0), 0.0)
    return w[..., None] * x


def hessian_phi(x, params: EnergyParams, floor: float = 0.0):
    """Hessian ``s^((p-2)/2) I + (p-2) s^((p-4)/2) x x^T`` with ``s = tau^2 + |x|^2``.

    Raises SingularPoint when ``s == 0`` and ``p != 2``.  A positive ``floor``
    replaces ``|x|`` by ``max(|x|, floor)`` in ``s``, which keeps the matrix
    finite and positive definite at critical points when ``tau = 0``.
    """
    x, xx = _sq(x)
    p = params.p
    s = params.tau**2 + np.maximum(xx, floor**2)
    n = x.shape[-1]
    eye = np.eye(n)
    if p == 2.0:
        return np.broadcast_to(eye, x.shape[:-1] + (n, n)).copy()
    if np.any(s == 0.0):
        raise SingularPoint("Hessian undefined at tau = 0, x = 0 for p != 2")
    a = s ** ((p - 2.0) / 2.0)
    b = (p - 2.0) * s ** ((p - 4.0) / 2.0)
    return a[..., None, None] * eye + b[..., None, None] * x[..., :, None] * x[..., None, :]


def third_phi(x, params: EnergyParams):
    """Third derivative tensor ``d^3 phi / dx_i dx_j dx_k``."""
    x, xx = _sq(x)
    p = params.p
    s = params.tau**2 + xx
    n = x.shape[-1]
    eye = np.eye(n)
    c1 = (p - 2.0) * s ** ((p - 4.0) / 2.0)
    c2 = (p - 2.0) * (p - 4.0) * s ** ((p - 6.0) / 2.0)
    sym = (
        x[..., None, None, :] * eye[:, :, None]
        + x[..., None, :, None] * eye[:, None, :]
        + x[..., :, None, None] * eye[None, :, :]
    )
    outer3 = x[..., :, None, None] * x[..., None, :, None] * x[..., None, None, :]
    return c1[..., None, None, None] * sym + c2[..., None, None, None] * outer3


# ---------------------------------------------------------------------------
# Randomized verification of the elementary inequalities for phi
# ---------------------------------------------------------------------------

INEQUALITIES = (
    "hessian_lower",   # y^T H y >= s^((p-4)/2) (tau^2 + min(p-1,1)|x|^2) |y|^2
    "hessian_norm",    # ||H||_2 <= max(1, p-1) s^((p-2)/2)
    "third_bound",     # max |D^3 phi| <= C(p) s^((p-3)/2)
    "convexity",       # phi(y) >= phi(x) + Dphi(x).(y - x)
    "monotone",        # S^((p-2)/2) |x-y|^2 <= C (Dphi(x)-Dphi(y)).(x-y)
    "lipschitz",       # |Dphi(x)-Dphi(y)| <= C S^((p-2)/2) |x-y|
    "growth",          # |Dphi|^q <= p phi <= 2^(p/2) max(tau^2,|x|^2)^(p/2) <= 2^(p/2)(tau^p+|x|^p)
    "growth_large_p",  # p >= 2: |Dphi| <= 2^((p-2)/2) (tau^(p-2)|x| + |x|^(p-1))
    "dual_small_p",    # p <= 2: |Dphi|^q <= Dphi.x
    "power_small_p",   # p <= 2: |x|^p <= 2^((2-p)/2) (Dphi.x + tau^(2-p) s^((p-2)/2) |x|^p)
)

# relative slack for rounding in the exact (constant-free) inequalities
_RTOL = 1e-10


@dataclass
class InequalityReport:
    n_samples: int
    passed: dict = field(default_factory=dict)
    failed: dict = field(default_factory=dict)
    worst_margin: dict = field(default_factory=dict)
    witness: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not any(self.failed.values())

    def summary(self) -> str:
        lines = []
        for name in INEQUALITIES:
            if name not in self.passed:
                continue
            lines.append(
                f"{name:16s} pass={self.passed[name]:7d} fail={self.failed[name]:3d} "
                f"worst_margin={self.worst_margin[name]: .3e}"
            )
        return "\n".join(lines)


def _ratio_monotone(x, y, p, tau):
    s = tau**2 + np.sum(x * x, -1) + np.sum(y * y, -1)
    d = x - y
    gx = _grad_vec(x, p, tau)
    gy = _grad_vec(y, p, tau)
    num = s ** ((p - 2) / 2) * np.sum(d * d, -1)
    den = np.sum((gx - gy) * d, -1)
    return num / den


def _ratio_lipschitz(x, y, p, tau):
    s = tau**2 + np.sum(x * x, -1) + np.sum(y * y, -1)
    d = x - y
    gx = _grad_vec(x, p, tau)
    gy = _grad_vec(y, p, tau)
    return np.linalg.norm(gx - gy, axis=-1) / (s ** ((p - 2) / 2) * np.linalg.norm(d, axis=-1))


def _grad_vec(x, p, tau):
    """grad_phi with per-sample p and tau arrays."""
    s = tau**2 + np.sum(x * x, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(s > 0, s ** ((p - 2) / 2), 0.0)
    return w[..., None] * x


def _third_ratio(x, p, tau):
    s = tau**2 + np.sum(x * x, -1)
    c1 = (p - 2) * s ** ((p - 4) / 2)
    c2 = (p - 2) * (p - 4) * s ** ((p - 6) / 2)
    eye = np.eye(2)
    sym = (
        x[:, None, None, :] * eye[:, :, None]
        + x[:, None, :, None] * eye[:, None, :]
        + x[:, :, None, None] * eye[None, :, :]
    )
    outer3 = x[:, :, None, None] * x[:, None, :, None] * x[:, None, None, :]
    t = c1[:, None, None, None] * sym + c2[:, None, None, None] * outer3
    return np.abs(t).reshape(len(x), -1).max(-1) / s ** ((p - 3) / 2)


def _calibration_grid(p):
    """Sup of the constant-bearing ratios at a single p over a dense grid of
    normalized configurations.  All ratios are invariant under the joint
    scaling (x, y, tau) -> c (x, y, tau) and under rotations, so a 3-parameter
    grid plus the y -> x limit covers the configuration space.
    """
    # third derivative: s = 1, |x| = t, direction psi
    t = np.linspace(0.0, 1.0, 201)
    psi = np.linspace(0.0, np.pi / 2, 33)
    T, P = np.meshgrid(t, psi, indexing="ij")
    xs = np.stack([T * np.cos(P), T * np.sin(P)], -1).reshape(-1, 2)
    taus = np.sqrt(np.clip(1.0 - np.sum(xs * xs, -1), 0.0, None))
    keep = taus**2 + np.sum(xs * xs, -1) > 0
    pv = np.full(keep.sum(), p)
    c_third = np.nanmax(_third_ratio(xs[keep], pv, taus[keep]))

    # pairs: tau = cos(beta), |x| = sin(beta) cos(om), |y| = sin(beta) sin(om), angle gam
    beta = np.linspace(0.0, np.pi / 2, 31)
    om = np.linspace(0.0, np.pi / 2, 41)
    gam = np.linspace(0.0, np.pi, 41)
    B, O, G = np.meshgrid(beta, om, gam, indexing="ij")
    B, O, G = B.ravel(), O.ravel(), G.ravel()
    tau = np.cos(B)
    a = np.sin(B) * np.cos(O)
    b = np.sin(B) * np.sin(O)
    x = np.stack([a, np.zeros_like(a)], -1)
    y = np.stack([b * np.cos(G), b * np.sin(G)], -1)
    d = np.linalg.norm(x - y, axis=-1)
    ok = d > 1e-9
    pv = np.full(ok.sum(), p)
    with np.errstate(divide="ignore", invalid="ignore"):
        r_mono = _ratio_monotone(x[ok], y[ok], pv, tau[ok])
        r_lip = _ratio_lipschitz(x[ok], y[ok], pv, tau[ok])
    # y -> x limit through the Hessian eigenvalues
    s1 = tau**2 + a**2
    with np.errstate(divide="ignore", invalid="ignore"):
        lam_par = np.where(s1 > 0, s1 ** ((p - 4) / 2) * (tau**2 + (p - 1) * a**2), np.nan)
        lam_perp = np.where(s1 > 0, s1 ** ((p - 2) / 2), np.nan)
        s2 = tau**2 + 2 * a**2
        lim_mono = s2 ** ((p - 2) / 2) / np.minimum(lam_par, lam_perp)
        lim_lip = np.maximum(lam_par, lam_perp) / s2 ** ((p - 2) / 2)
    c_mono = np.nanmax(np.concatenate([r_mono, lim_mono]))
    c_lip = np.nanmax(np.concatenate([r_lip, lim_lip]))
    return c_third, c_mono, c_lip


def calibrate_constants(p_range=(1.2, 4.0), n_bins=96, margin=1.05):
    """Empirical constants for the third-derivative, monotonicity and Lipschitz
    bounds, tabulated on bins over ``p_range``.

    Each bin stores the largest grid value found at its two edges and its
    midpoint, multiplied by ``margin``.  Returns ``(edges, table)`` with
    ``table`` of shape ``(n_bins, 3)``.
    """
    lo, hi = p_range
    edges = np.linspace(lo, hi, n_bins + 1)
    nodes = np.linspace(lo, hi, 2 * n_bins + 1)
    vals = np.array([_calibration_grid(p) for p in nodes])
    table = np.maximum(np.maximum(vals[0:-1:2], vals[1::2]), vals[2::2]) * margin
    return edges, table


def _lookup(edges, table, p):
    idx = np.clip(np.searchsorted(edges, p, side="right") - 1, 0, len(table) - 1)
    return table[idx]


def verify_inequalities(
    n_samples: int = 100_000,
    rng_seed=0,
    p_range=(1.5, 3.0),
    tau_range=(0.0, 1.0),
    raise_on_violation: bool = True,
    calibration=None,
) -> InequalityReport:
    """Draw random ``(x, y, p, tau)`` in the plane and test every inequality.

    Constants for the bounds whose constant is not explicit are calibrated
    beforehand on a deterministic grid (see :func:`calibrate_constants`).
    Returns an :class:`InequalityReport`; with ``raise_on_violation`` the first
    failing inequality raises :class:`InequalityViolation` with its witness.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    lo, hi = p_range
    if lo <= 1.0 or hi < lo:
        raise ValueError(f"invalid p_range {p_range}")
    if tau_range[0] < 0 or tau_range[1] < tau_range[0]:
        raise ValueError(f"invalid tau_range {tau_range}")
    rng = np.random.default_rng(rng_seed)
    if calibration is None:
        calibration = calibrate_constants((lo, hi))
    edges, table = calibration

    n = n_samples
    p = rng.uniform(lo, hi, n)
    tau = rng.uniform(*tau_range, n)
    # a tenth of the draws sit exactly at tau = 0, the degenerate case
    tau[rng.random(n) < 0.1] = 0.0
    mag_x = 10.0 ** rng.uniform(-2, 1, n)
    mag_y = 10.0 ** rng.uniform(-2, 1, n)
    ang_x = rng.uniform(0, 2 * np.pi, n)
    ang_y = rng.uniform(0, 2 * np.pi, n)
    x = mag_x[:, None] * np.stack([np.cos(ang_x), np.sin(ang_x)], -1)
    y = mag_y[:, None] * np.stack([np.cos(ang_y), np.sin(ang_y)], -1)
    # near-coincident and antipodal pairs probe the sharp ends of the bounds
    k = rng.random(n)
    near = k < 0.1
    y[near] = x[near] * (1.0 + 1e-3 * rng.standard_normal((near.sum(), 1))) + 1e-3 * mag_x[
        near, None
    ] * rng.standard_normal((near.sum(), 2))
    anti = (k >= 0.1) & (k < 0.15)
    y[anti] = -x[anti]

    consts = _lookup(edges, table, p)
    report = InequalityReport(n_samples=n)
    report.constants = {
        "third_bound": float(consts[:, 0].max()),
        "monotone": float(consts[:, 1].max()),
        "lipschitz": float(consts[:, 2].max()),
    }

    s = tau**2 + np.sum(x * x, -1)
    xn = np.sqrt(np.sum(x * x, -1))
    gx = _grad_vec(x, p, tau)
    gy = _grad_vec(y, p, tau)
    phix = s ** (p / 2) / p
    phiy = (tau**2 + np.sum(y * y, -1)) ** (p / 2) / p
    q = p / (p - 1)

    # Hessian at x, evaluated per sample
    a = s ** ((p - 2) / 2)
    b = (p - 2) * s ** ((p - 4) / 2)
    H = a[:, None, None] * np.eye(2) + b[:, None, None] * x[:, :, None] * x[:, None, :]

    checks = {}
    lhs = np.einsum("ni,nij,nj->n", y, H, y)
    rhs = s ** ((p - 4) / 2) * (tau**2 + np.minimum(p - 1, 1) * xn**2) * np.sum(y * y, -1)
    checks["hessian_lower"] = (rhs, lhs)  # rhs <= lhs

    norm = np.linalg.norm(H, ord=2, axis=(1, 2))
    checks["hessian_norm"] = (norm, np.maximum(1, p - 1) * a)

    checks["third_bound"] = (_third_ratio(x, p, tau) * s ** ((p - 3) / 2), consts[:, 0] * s ** ((p - 3) / 2))

    checks["convexity"] = (phix + np.sum(gx * (y - x), -1), phiy)

    S = tau**2 + np.sum(x * x, -1) + np.sum(y * y, -1)
    d = x - y
    checks["monotone"] = (
        S ** ((p - 2) / 2) * np.sum(d * d, -1),
        consts[:, 1] * np.sum((gx - gy) * d, -1),
    )
    checks["lipschitz"] = (
        np.linalg.norm(gx - gy, axis=-1),
        consts[:, 2] * S ** ((p - 2) / 2) * np.linalg.norm(d, axis=-1),
    )

    g_norm = np.linalg.norm(gx, axis=-1)
    chain = np.stack(
        [
            g_norm**q,
            p * phix,
            2 ** (p / 2) * np.maximum(tau**2, xn**2) ** (p / 2),
            2 ** (p / 2) * (tau**p + xn**p),
        ],
        -1,
    )
    # every link of the chain must hold: the worst link decides
    gap = (chain[:, 1:] * (1 + _RTOL) - chain[:, :-1]) / np.abs(chain[:, 1:])
    worst = np.argmin(gap, axis=1)
    rows = np.arange(n)
    checks["growth"] = (chain[rows, worst], chain[rows, worst + 1])

    big = p >= 2
    checks["growth_large_p"] = (
        g_norm[big],
        2 ** ((p[big] - 2) / 2) * (tau[big] ** (p[big] - 2) * xn[big] + xn[big] ** (p[big] - 1)),
    )
    small = p <= 2
    gdotx = np.sum(gx * x, -1)
    checks["dual_small_p"] = (g_norm[small] ** q[small], gdotx[small])
    ps = p[small]
    checks["power_small_p"] = (
        xn[small] ** ps,
        2 ** ((2 - ps) / 2) * (gdotx[small] + tau[small] ** (2 - ps) * s[small] ** ((ps - 2) / 2) * xn[small] ** ps),
    )

    witness_cols = {"x": x, "y": y, "p": p, "tau": tau}
    masks = {"growth_large_p": big, "dual_small_p": small, "power_small_p": small}
    first_failure = None
    for name in INEQUALITIES:
        small_side, large_side = checks[name]
        scale = np.maximum(np.abs(large_side), np.abs(small_side))
        margin = (large_side - small_side) / np.where(scale > 0, scale, 1.0)
        bad = small_side > large_side + _RTOL * scale + 1e-300
        report.passed[name] = int((~bad).sum())
        report.failed[name] = int(bad.sum())
        report.worst_margin[name] = float(margin.min()) if margin.size else float("nan")
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            idx = np.flatnonzero(masks[name])[i] if name in masks else i
            wit = {k: (v[idx].tolist() if np.ndim(v) > 1 else float(v[idx])) for k, v in witness_cols.items()}
            report.witness[name] = wit
            if first_failure is None:
                first_failure = (name, wit)
    if raise_on_violation and first_failure is not None:
        raise InequalityViolation(*first_failure)
    return report
