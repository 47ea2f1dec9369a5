"""Deterministic analytic layer: the nonlinear log-Laplace flow and its tilts.

The flow ``v(t, f)`` solves ``dv/dt = -psi(v)`` from ``v(0, f) = f`` and
determines every exact expectation used to cross-check the Monte Carlo
engine:

* Laplace functional     ``E_x exp(-<f, X_t>) = exp(-<x, v(t, f)>)``
* tilt weight ``theta``  the exponential-change-of-measure correction, solved
  as a linear ODE driven by ``v`` on the same grid
* tilted functional      ``exp(-<x, v>) * <theta, phi o x> / <phi, x>``

Integration is classical fixed-step RK4 on a uniform grid; the step is
shrunk so the grid lands exactly on the requested horizon.  Smoothness of
``psi`` on the nonnegative orthant makes the order-4 semigroup defect a
usable accuracy certificate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mechanism import BranchingMechanism, RadialMeasure, _as_vector, _check_nonnegative
from .spectral import SpectralData, mean_matrix

__all__ = ["FlowError", "FlowSolution", "ThetaSolution", "solve_v",
           "laplace_functional", "semigroup_check", "mean_consistency",
           "solve_theta", "tilted_laplace"]

# Negative excursions of v below this magnitude are clipped to zero; anything
# larger aborts, since the exact flow is nonnegative for nonnegative data.
CLIP_TOL = 1e-12


class FlowError(RuntimeError):
    """Flow integration failed (blow-up or loss of nonnegativity)."""


@dataclass(frozen=True)
class FlowSolution:
    t_grid: np.ndarray        # (n+1,)
    v: np.ndarray             # (n+1, d)
    f: np.ndarray             # terminal datum v(0)
    dt: float                 # effective step actually used
    clip_count: int           # number of tiny negative components clipped

    @property
    def terminal(self) -> np.ndarray:
        return self.v[-1]


@dataclass(frozen=True)
class ThetaSolution:
    t_grid: np.ndarray
    theta: np.ndarray         # (n+1, d), componentwise in (0, 1]
    flow: FlowSolution        # the v-flow integrated on the same grid

    @property
    def terminal(self) -> np.ndarray:
        return self.theta[-1]


def _grid(t: float, dt: float) -> tuple[int, float]:
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0:
        return 0, dt
    n = max(1, math.ceil(t / dt - 1e-12))
    return n, t / n


def _rk4_step(rhs, y: np.ndarray, h: float) -> np.ndarray:
    k1 = rhs(y)
    k2 = rhs(y + 0.5 * h * k1)
    k3 = rhs(y + 0.5 * h * k2)
    k4 = rhs(y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


class _Clipper:
    """Clip tiny negative components in place; abort on genuine negatives."""

    def __init__(self, what: str):
        self.count = 0
        self.what = what

    def __call__(self, y: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(y)):
            raise FlowError(f"{self.what} became non-finite")
        neg = y < 0
        if np.any(neg):
            worst = float(y[neg].min())
            if worst < -CLIP_TOL:
                raise FlowError(f"{self.what} lost nonnegativity: min component {worst:.3g}")
            self.count += int(neg.sum())
            y = np.where(neg, 0.0, y)
        return y


def solve_v(mech: BranchingMechanism, f, t: float, dt: float = 1e-3) -> FlowSolution:
    """Integrate ``dv/dt = -psi(v)`` from ``f`` on a uniform grid covering [0, t]."""
    f = _as_vector(f, mech.d, "f")
    _check_nonnegative(f, "f")
    n, h = _grid(t, dt)
    grid = np.linspace(0.0, t, n + 1)
    values = np.empty((n + 1, mech.d))
    values[0] = f
    clip = _Clipper("v")
    rhs = lambda y: -mech._psi_unchecked(y)
    y = f.copy()
    for k in range(n):
        y_new = _rk4_step(rhs, y, h)
        if not np.all(np.isfinite(y_new)):
            # one retry with two half steps before declaring blow-up
            y_half = _rk4_step(rhs, y, 0.5 * h)
            y_new = _rk4_step(rhs, y_half, 0.5 * h)
            if not np.all(np.isfinite(y_new)):
                raise FlowError(f"flow blew up near t = {grid[k + 1]:.6g}; "
                                "check the mechanism parameters")
        y = clip(y_new)
        values[k + 1] = y
    return FlowSolution(t_grid=grid, v=values, f=f, dt=h, clip_count=clip.count)


def laplace_functional(mech: BranchingMechanism, x, f, t: float, dt: float = 1e-3) -> float:
    """``exp(-<x, v(t, f)>)``, a value in (0, 1] for nonnegative data."""
    x = _as_vector(x, mech.d, "x")
    _check_nonnegative(x, "x")
    return float(math.exp(-float(x @ solve_v(mech, f, t, dt).terminal)))


def semigroup_check(mech: BranchingMechanism, f, s: float, t: float, dt: float = 1e-3) -> float:
    """Max componentwise defect ``|v(t+s, f) - v(t, v(s, f))|`` (solver self-test)."""
    direct = solve_v(mech, f, s + t, dt).terminal
    composed = solve_v(mech, solve_v(mech, f, s, dt).terminal, t, dt).terminal
    return float(np.max(np.abs(direct - composed)))


def mean_consistency(mech: BranchingMechanism, t: float, dt: float = 1e-3,
                     eps: float = 1e-5) -> float:
    """Defect between the linearized flow at 0 and the mean matrix.

    The directional derivative of ``v(t, .)`` at zero along ``e_j`` equals
    column j of ``M(t)^T``.  Differentiation uses a second-order one-sided
    stencil so every evaluation stays inside the admissible orthant (the jump
    integrals diverge for negative arguments):
    ``dv/de ~ (4 v(eps e_j) - v(2 eps e_j)) / (2 eps)`` since ``v(t, 0) = 0``.
    """
    m = mean_matrix(mech.b, t)
    worst = 0.0
    for j in range(mech.d):
        e = np.zeros(mech.d)
        e[j] = 1.0
        v1 = solve_v(mech, eps * e, t, dt).terminal
        v2 = solve_v(mech, 2.0 * eps * e, t, dt).terminal
        deriv = (4.0 * v1 - v2) / (2.0 * eps)
        worst = max(worst, float(np.max(np.abs(deriv - m[:, j]))))
    return worst


def solve_theta(mech: BranchingMechanism, spectral: SpectralData, f,
                t: float, dt: float = 1e-3) -> ThetaSolution:
    """Integrate the tilt weight jointly with ``v`` on one grid.

    theta(0) = 1 and

        dtheta_i/dt = [(B^T - lambda1 I)(phi o theta)]_i / phi_i
                      - 2 c_i v_i(t) theta_i
                      + integral <theta, phi o z> (exp(-<v(t), z>) - 1) mu_i(dz) / phi_i.

    The drift part is the generator of the associated type chain, which
    preserves constants, so f = 0 keeps theta identically one.
    """
    if not spectral.is_supercritical:
        raise FlowError("tilt weights are defined for supercritical mechanisms")
    f = _as_vector(f, mech.d, "f")
    _check_nonnegative(f, "f")
    d = mech.d
    phi, lam = spectral.phi, spectral.lambda1
    shifted = mech.b.T - lam * np.eye(d)

    def rhs(y: np.ndarray) -> np.ndarray:
        v, theta = y[:d], y[d:]
        dv = -mech._psi_unchecked(np.maximum(v, 0.0))
        w = phi * theta
        dtheta = (shifted @ w) / phi - 2.0 * mech.c * np.maximum(v, 0.0) * theta
        for i, mu in enumerate(mech.measures):
            if isinstance(mu, RadialMeasure):
                a = float(np.maximum(v, 0.0) @ mu.direction)
                dtheta[i] += float(w @ mu.direction) * mu.theta_integral_factor(a) / phi[i]
            else:
                dtheta[i] += mu.theta_integral(np.maximum(v, 0.0), w) / phi[i]
        return np.concatenate([dv, dtheta])

    n, h = _grid(t, dt)
    grid = np.linspace(0.0, t, n + 1)
    v_values = np.empty((n + 1, d))
    theta_values = np.empty((n + 1, d))
    v_values[0] = f
    theta_values[0] = 1.0
    clip_v = _Clipper("v")
    y = np.concatenate([f, np.ones(d)])
    for k in range(n):
        y = _rk4_step(rhs, y, h)
        y[:d] = clip_v(y[:d])
        theta = y[d:]
        if not np.all(np.isfinite(theta)) or np.any(theta <= 0):
            raise FlowError(f"tilt weight left (0, 1] near t = {grid[k + 1]:.6g}")
        np.minimum(theta, 1.0, out=theta)  # guard O(h^5) excursions above one
        v_values[k + 1] = y[:d]
        theta_values[k + 1] = theta
    flow = FlowSolution(t_grid=grid, v=v_values, f=f, dt=h, clip_count=clip_v.count)
    return ThetaSolution(t_grid=grid, theta=theta_values, flow=flow)


def tilted_laplace(mech: BranchingMechanism, spectral: SpectralData, x, f,
                   t: float, dt: float = 1e-3) -> float:
    """Laplace functional under the martingale change of measure.

    Equals ``exp(-<x, v(t,f)>) * <theta(t), phi o x> / <phi, x>``.
    """
    x = _as_vector(x, mech.d, "x")
    _check_nonnegative(x, "x")
    if not np.any(x > 0):
        raise ValueError("the tilted functional is undefined at x = 0")
    sol = solve_theta(mech, spectral, f, t, dt)
    base = math.exp(-float(x @ sol.flow.terminal))
    weight = float(sol.terminal @ (spectral.phi * x)) / float(spectral.phi @ x)
    return base * weight
