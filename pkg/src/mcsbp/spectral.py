"""Mean semigroup and dominant eigenstructure of the effective drift.

The expected-mass matrix of a d-type branching process is the matrix
exponential ``M(t) = expm(t B^T)``.  For irreducible drift its dominant
eigenvalue ``lambda1`` is real with strictly positive right/left
eigenvectors ``phi, phi_hat``; the sign of ``lambda1`` classifies the
process (subcritical / critical / supercritical), and
``M(t) exp(-lambda1 t)`` converges exponentially fast to the rank-one
projector ``P = phi phi_hat^T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

__all__ = ["SpectralError", "SpectralData", "DecayFit", "mean_matrix", "perron",
           "is_irreducible", "check_decay"]

CRITICAL_TOL = 1e-10


class SpectralError(RuntimeError):
    """Spectral analysis failed (reducible drift or non-convergent iteration)."""


@dataclass(frozen=True)
class SpectralData:
    """Dominant eigendata, normalized so <phi, 1> = 1 and <phi, phi_hat> = 1."""

    lambda1: float
    phi: np.ndarray
    phi_hat: np.ndarray
    projector: np.ndarray       # P_ij = phi_i * phi_hat_j
    criticality: str            # 'subcritical' | 'critical' | 'supercritical'

    def __post_init__(self):
        for arr in (self.phi, self.phi_hat, self.projector):
            arr.setflags(write=False)

    @property
    def m_phi(self) -> float:
        return float(self.phi.min())

    @property
    def M_phi(self) -> float:
        return float(self.phi.max())

    @property
    def is_supercritical(self) -> bool:
        return self.criticality == "supercritical"


def mean_matrix(b, t: float) -> np.ndarray:
    """M(t) = expm(t B^T), computed by scaling-and-squaring with Pade approximants."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    b = np.asarray(b, dtype=float)
    return expm(t * b.T)


def is_irreducible(b) -> bool:
    """Strong connectivity of the off-diagonal support digraph, decided combinatorially."""
    b = np.asarray(b, dtype=float)
    d = b.shape[0]
    if d == 1:
        return True
    adj = (b > 0) & ~np.eye(d, dtype=bool)
    reach = np.eye(d, dtype=bool) | adj
    for _ in range(d):
        new = reach | (reach @ reach)
        if np.array_equal(new, reach):
            break
        reach = new
    return bool(reach.all() and reach.T.all())


def _power_iterate(m: np.ndarray, b_t: np.ndarray, tol: float, max_iter: int):
    """Dominant eigenpair of the positive matrix ``m`` by normalized power
    iteration, with nonnegativity projection; convergence is measured by the
    eigen-residual of ``b_t`` so the returned pair satisfies it directly."""
    d = m.shape[0]
    v = np.full(d, 1.0 / d)
    lam = 0.0
    for _ in range(max_iter):
        w = m @ v
        w = np.maximum(w, 0.0)
        s = w.sum()
        if not np.isfinite(s) or s <= 0:
            raise SpectralError("power iteration lost positivity")
        v_new = w / s
        lam = math.log(s)  # <1, v> = 1 throughout, so s estimates e^{lambda1}
        if np.max(np.abs(v_new - v)) < tol:
            v = v_new
            resid = np.max(np.abs(b_t @ v - lam * v))
            if resid <= 1e-11:
                return v, lam
        v = v_new
    raise SpectralError(
        "power iteration did not converge; dominant pair may be complex or defective"
    )


def perron(b, tol: float = 1e-12, max_iter: int = 100_000) -> SpectralData:
    """Dominant eigenvalue and positive eigenvectors of ``B^T``.

    Uses power iteration on ``expm(B^T)`` (a strictly positive matrix for
    irreducible drift), which is guaranteed to have a simple dominant real
    eigenvalue ``exp(lambda1)``.
    """
    b = np.asarray(b, dtype=float)
    d = b.shape[0]
    if not is_irreducible(b):
        raise SpectralError("drift matrix is not irreducible")
    b_t = b.T
    m = expm(b_t)

    phi, lam = _power_iterate(m, b_t, tol, max_iter)
    phi_hat, lam_left = _power_iterate(m.T, b, tol, max_iter)
    if abs(lam - lam_left) > 1e-8 * max(1.0, abs(lam)):
        raise SpectralError("left/right eigenvalue estimates disagree")
    if np.any(phi <= 0) or np.any(phi_hat <= 0):
        raise SpectralError("dominant eigenvectors are not strictly positive")

    phi = phi / phi.sum()                      # <phi, 1> = 1
    phi_hat = phi_hat / float(phi @ phi_hat)   # <phi, phi_hat> = 1

    if lam > CRITICAL_TOL:
        crit = "supercritical"
    elif lam < -CRITICAL_TOL:
        crit = "subcritical"
    else:
        crit = "critical"
    if d == 1:
        lam = float(b[0, 0])  # exact in the scalar case
    return SpectralData(
        lambda1=lam,
        phi=phi,
        phi_hat=phi_hat,
        projector=np.outer(phi, phi_hat),
        criticality=crit,
    )


@dataclass(frozen=True)
class DecayFit:
    """Log-linear fit of ||M(t) e^{-lambda1 t} - P|| over a time grid."""

    t_grid: np.ndarray
    deviations: np.ndarray      # max-absolute-entry norm per grid point
    c1: float                   # fitted prefactor
    c2: float                   # fitted decay rate (spectral gap estimate)
    max_residual: float         # worst |log deviation - fit| over used points
    c3_empirical: float         # sup over the grid of ||M(t)|| e^{-lambda1 t}


def check_decay(spectral: SpectralData, b, t_grid) -> DecayFit:
    """Measure the deviation from the rank-one projector and fit its decay."""
    b = np.asarray(b, dtype=float)
    t_grid = np.asarray(t_grid, dtype=float)
    devs = np.empty(t_grid.shape)
    sup_norm = 0.0
    for k, t in enumerate(t_grid):
        m = mean_matrix(b, t)
        scaled = m * math.exp(-spectral.lambda1 * t)
        devs[k] = np.max(np.abs(scaled - spectral.projector))
        sup_norm = max(sup_norm, float(np.max(np.abs(scaled))))

    usable = devs > 1e-14
    if usable.sum() < 2:
        return DecayFit(t_grid=t_grid, deviations=devs, c1=0.0, c2=math.inf,
                        max_residual=0.0, c3_empirical=sup_norm)
    t_use, log_dev = t_grid[usable], np.log(devs[usable])
    slope, intercept = np.polyfit(t_use, log_dev, 1)
    resid = np.max(np.abs(log_dev - (slope * t_use + intercept)))
    return DecayFit(t_grid=t_grid, deviations=devs, c1=float(math.exp(intercept)),
                    c2=float(-slope), max_residual=float(resid), c3_empirical=sup_norm)
