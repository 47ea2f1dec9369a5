"""Branching mechanisms: jump-measure families, drift conversion, and moment checks.

A d-type branching mechanism is the vector function

    psi_i(u) = -<u, B e_i> + c_i * u_i**2
               + integral( exp(-<u,z>) - 1 + <u,z> ) mu_i(dz),

where ``B`` is the effective drift matrix, ``c`` holds nonnegative diffusion
coefficients and each ``mu_i`` is a jump measure on the nonnegative orthant
with a finite first moment away from the origin.  Two parametric measure
families are supported so that every moment is available either in closed
form or by adaptive quadrature, and so that jump sampling is exact:

* :class:`AtomicMeasure` -- finitely many atoms, finite activity.
* :class:`RadialMeasure` -- mass along a single direction ``pi`` (a
  probability vector over types) with radial density
  ``coeff * r**-(1+alpha) * (ln r)**-gamma`` above ``r0`` and an optional
  small-jump power density ``small_coeff * r**-(1+beta)`` on ``(0, r0]``.

Divergence of moment integrals is always decided analytically from the
exponents; quadrature is only used for values already known to be finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import integrate, special

__all__ = [
    "MechanismError",
    "QuadratureError",
    "ZeroMeasure",
    "AtomicMeasure",
    "RadialMeasure",
    "BranchingMechanism",
    "XlogxVerdict",
    "convert_drift",
    "evaluate_psi",
    "measure_moment",
    "sample_jump",
    "check_xlogx",
    "validate",
]

# Adaptive quadrature tolerances used throughout the module.
QUAD_ABS_TOL = 1e-10
QUAD_REL_TOL = 1e-8


class MechanismError(ValueError):
    """Invalid mechanism or measure parameters."""


class QuadratureError(RuntimeError):
    """Adaptive quadrature failed to reach the requested tolerance."""


def _quad(fn, a, b, points=None):
    """scipy.integrate.quad with the module tolerances and an error check."""
    out = integrate.quad(
        fn, a, b,
        epsabs=QUAD_ABS_TOL, epsrel=QUAD_REL_TOL,
        limit=200, points=points, full_output=1,
    )
    value, abserr = out[0], out[1]
    if len(out) > 3:  # message present -> warning raised by quadpack
        raise QuadratureError(
            f"quadrature on [{a}, {b}] did not converge: "
            f"estimate {value:.6g}, achieved tolerance {abserr:.3g}: {out[3]}"
        )
    return value


def _upper_gamma(a: float, x: float) -> float:
    """Unregularized upper incomplete gamma for any real ``a`` and ``x >= 0``.

    Nonpositive ``a`` is lifted with Gamma(a, x) = (Gamma(a+1, x) - x^a e^-x)/a,
    bottoming out at Gamma(0, x) = E1(x).
    """
    if x < 0:
        raise ValueError("x must be nonnegative")
    if a > 1e-12:
        return float(special.gammaincc(a, x) * special.gamma(a))
    if abs(a) <= 1e-12:
        return float(special.exp1(x)) if x > 0 else math.inf
    if x == 0.0:
        return math.inf  # Gamma(a, 0) diverges for a <= 0
    return (_upper_gamma(a + 1.0, x) - x**a * math.exp(-x)) / a


def power_log_tail_integral(p: float, q: float, lower: float) -> float:
    """Exact value of ``integral_lower^inf r**p * (ln r)**q dr``.

    Returns ``inf`` when the integral diverges (p > -1, or p == -1 with
    q >= -1).  Requires ``lower > 1`` whenever ``q != 0`` so the logarithm
    factor is positive, except that ``q > -1`` tolerates ``lower == 1``.
    """
    if lower <= 0:
        raise ValueError("lower must be positive")
    if q != 0 and lower < 1.0:
        raise ValueError("log-weighted tails need lower >= 1")
    if p > -1.0 or (p == -1.0 and q >= -1.0):
        return math.inf
    if q == 0.0:
        return lower ** (p + 1.0) / (-(p + 1.0))
    u0 = math.log(lower)
    if p == -1.0:
        return u0 ** (q + 1.0) / (-(q + 1.0))
    s = -(p + 1.0)
    return s ** (-(q + 1.0)) * _upper_gamma(q + 1.0, s * u0)


def _as_vector(x, d: int, name: str = "vector") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (d,):
        raise MechanismError(f"{name} must have shape ({d},), got {x.shape}")
    return x


def _check_nonnegative(x: np.ndarray, name: str) -> None:
    if np.any(x < 0):
        raise MechanismError(f"{name} must be componentwise nonnegative")


# ---------------------------------------------------------------------------
# Measure families
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ZeroMeasure:
    """The null jump measure (purely continuous branching for this type)."""

    d: int

    @property
    def dimension(self) -> int:
        return self.d

    @property
    def is_infinite_activity(self) -> bool:
        return False

    def first_moment(self) -> np.ndarray:
        return np.zeros(self.d)

    def diagonal_excess_moment(self, i: int) -> float:
        return 0.0

    def truncated_second_moment(self) -> float:
        return 0.0

    def xlogx_moment(self) -> float:
        return 0.0

    def psi_integral(self, u: np.ndarray) -> float:
        return 0.0

    def theta_integral(self, v: np.ndarray, w: np.ndarray) -> float:
        return 0.0

    def retained_intensity(self, eps: float) -> float:
        return 0.0

    def retained_first_moment(self, eps: float) -> np.ndarray:
        return np.zeros(self.d)

    def small_jump_compensation(self, eps: float) -> np.ndarray:
        return np.zeros(self.d)

    def dropped_variance_rate(self, eps: float) -> float:
        return 0.0

    def sample_jumps(self, n: int, eps: float, rng) -> np.ndarray:
        if n:
            raise MechanismError("the zero measure has no jumps to sample")
        return np.zeros((0, self.d))

    def sample_size_biased(self, n: int, j: int, rng) -> np.ndarray:
        raise MechanismError("the zero measure has no size-biased law")


@dataclass(frozen=True)
class AtomicMeasure:
    """Finite-activity jump measure: atoms ``z_k`` arriving at ``rate_k``."""

    atoms: np.ndarray          # (n_atoms, d), each row nonzero and >= 0
    rates: np.ndarray          # (n_atoms,), positive

    def __post_init__(self):
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        rates = np.atleast_1d(np.asarray(self.rates, dtype=float))
        if atoms.shape[0] != rates.shape[0]:
            raise MechanismError("one rate per atom required")
        if np.any(rates <= 0):
            raise MechanismError("atom rates must be positive")
        if np.any(atoms < 0) or np.any(np.all(atoms == 0, axis=1)):
            raise MechanismError("atoms must be nonzero vectors in the nonnegative orthant")
        atoms.setflags(write=False)
        rates.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "rates", rates)

    @property
    def dimension(self) -> int:
        return self.atoms.shape[1]

    @property
    def is_infinite_activity(self) -> bool:
        return False

    @cached_property
    def total_rate(self) -> float:
        return float(self.rates.sum())

    def first_moment(self) -> np.ndarray:
        """integral z mu(dz), componentwise."""
        return self.rates @ self.atoms

    def diagonal_excess_moment(self, i: int) -> float:
        """integral (z_i - 1)^+ mu(dz)."""
        return float(self.rates @ np.maximum(self.atoms[:, i] - 1.0, 0.0))

    def truncated_second_moment(self) -> float:
        """integral (||z|| ^ ||z||**2) mu(dz), Euclidean norm."""
        norms = np.linalg.norm(self.atoms, axis=1)
        return float(self.rates @ np.minimum(norms, norms**2))

    def xlogx_moment(self) -> float:
        """integral_{<1,z> >= 1} <1,z> ln<1,z> mu(dz) -- always finite here."""
        mass = self.atoms.sum(axis=1)
        sel = mass >= 1.0
        return float(self.rates[sel] @ (mass[sel] * np.log(mass[sel])))

    def psi_integral(self, u: np.ndarray) -> float:
        """integral (exp(-<u,z>) - 1 + <u,z>) mu(dz) in closed form."""
        s = self.atoms @ u
        return float(self.rates @ (np.expm1(-s) + s))

    def theta_integral(self, v: np.ndarray, w: np.ndarray) -> float:
        """integral <w, z> (exp(-<v,z>) - 1) mu(dz) in closed form."""
        return float(self.rates @ ((self.atoms @ w) * np.expm1(-(self.atoms @ v))))

    # -- sampling -----------------------------------------------------------

    def retained_intensity(self, eps: float) -> float:
        return self.total_rate

    def retained_first_moment(self, eps: float) -> np.ndarray:
        return self.first_moment()

    def small_jump_compensation(self, eps: float) -> np.ndarray:
        return np.zeros(self.dimension)

    def dropped_variance_rate(self, eps: float) -> float:
        return 0.0

    def sample_jumps(self, n: int, eps: float, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` jumps; ``eps`` is ignored for finite-activity measures."""
        if n == 0:
            return np.zeros((0, self.dimension))
        p = self.rates / self.total_rate
        idx = rng.choice(len(p), size=n, p=p)
        return self.atoms[idx]

    def sample_size_biased(self, n: int, j: int, rng: np.random.Generator) -> np.ndarray:
        """Draw from z_j mu(dz) / integral z_j mu(dz)."""
        weights = self.rates * self.atoms[:, j]
        total = weights.sum()
        if total <= 0:
            raise MechanismError(f"measure puts no mass on coordinate {j}")
        idx = rng.choice(len(weights), size=n, p=weights / total)
        return self.atoms[idx]


@dataclass(frozen=True)
class RadialMeasure:
    """Jump measure along a fixed direction with a power/log radial density.

    The measure of a set A is ``integral 1{r * direction in A} rho(r) dr``
    where

        rho(r) = coeff * r**-(1+alpha) * (ln r)**-gamma     on (r0, inf)
        rho(r) = small_coeff * r**-(1+small_beta)           on (0, r0]

    The tail must have a finite first moment (alpha > 1, or alpha == 1 with
    gamma > 1); the small-jump part makes the measure infinitely active.
    """

    direction: np.ndarray
    coeff: float = 1.0
    alpha: float = 1.5
    gamma: float = 0.0
    r0: float = 1.0
    small_coeff: float = 0.0
    small_beta: float = 0.5

    def __post_init__(self):
        direction = np.asarray(self.direction, dtype=float)
        if np.any(direction < 0) or not math.isclose(direction.sum(), 1.0, abs_tol=1e-12):
            raise MechanismError("direction must be a probability vector over types")
        direction.setflags(write=False)
        object.__setattr__(self, "direction", direction)
        if self.coeff <= 0 or self.r0 <= 0:
            raise MechanismError("tail coeff and r0 must be positive")
        if self.alpha <= 0 or self.gamma < 0:
            raise MechanismError("tail needs alpha > 0 and gamma >= 0")
        if self.gamma > 0 and self.r0 <= 1.0:
            raise MechanismError("log-corrected tails need r0 > 1")
        if self.small_coeff < 0:
            raise MechanismError("small_coeff must be nonnegative")
        if self.small_coeff > 0 and not (0.0 < self.small_beta < 2.0):
            raise MechanismError("small-jump index beta must lie in (0, 2)")
        if not self._tail_moment_finite(1):
            raise MechanismError(
                f"tail first moment integral r*rho(r) diverges "
                f"(alpha={self.alpha}, gamma={self.gamma})"
            )

    @property
    def dimension(self) -> int:
        return self.direction.shape[0]

    @property
    def is_infinite_activity(self) -> bool:
        return self.small_coeff > 0

    def _tail_moment_finite(self, k: int) -> bool:
        """Exponent test for integral_{r0}^inf r**k rho(r) dr."""
        return self.alpha > k or (self.alpha == k and self.gamma > 1.0)

    def _tail_integral(self, k: float, lower: float) -> float:
        """integral_{max(lower, r0)}^inf r**k rho_tail(r) dr, exact."""
        lo = max(lower, self.r0)
        return self.coeff * power_log_tail_integral(k - 1.0 - self.alpha, -self.gamma, lo)

    def _small_integral(self, k: float, lo: float, hi: float) -> float:
        """integral_lo^hi r**k rho_small(r) dr over (0, r0], exact power law."""
        if self.small_coeff == 0:
            return 0.0
        lo, hi = max(lo, 0.0), min(hi, self.r0)
        if hi <= lo:
            return 0.0
        e = k - self.small_beta  # integrand r**(e-1) up to the coefficient
        if e == 0.0:
            if lo == 0.0:
                return math.inf
            return self.small_coeff * math.log(hi / lo)
        if lo == 0.0 and e < 0.0:
            return math.inf
        lo_term = 0.0 if lo == 0.0 else lo**e
        return self.small_coeff * (hi**e - lo_term) / e

    # -- moments ------------------------------------------------------------

    @cached_property
    def radial_first_moment(self) -> float:
        """integral r rho(r) dr over the full support (may be inf)."""
        return self._small_integral(1.0, 0.0, self.r0) + self._tail_integral(1.0, 0.0)

    def first_moment(self) -> np.ndarray:
        return self.radial_first_moment * self.direction

    def diagonal_excess_moment(self, i: int) -> float:
        """integral (z_i - 1)^+ mu(dz) = pi_i * integral_{r > 1/pi_i} (r - 1/pi_i) rho dr."""
        pi_i = self.direction[i]
        if pi_i == 0.0:
            return 0.0
        thresh = 1.0 / pi_i
        first = self._small_integral(1.0, thresh, self.r0) + self._tail_integral(1.0, thresh)
        mass = self._small_integral(0.0, thresh, self.r0) + self._tail_integral(0.0, thresh)
        return pi_i * (first - thresh * mass)

    def truncated_second_moment(self) -> float:
        """integral (||z|| ^ ||z||**2) mu(dz); ||z|| = r * ||direction||."""
        nrm = float(np.linalg.norm(self.direction))
        cut = 1.0 / nrm
        total = nrm**2 * self._small_integral(2.0, 0.0, min(cut, self.r0))
        total += nrm * self._small_integral(1.0, cut, self.r0)
        if cut > self.r0:
            # bounded segment of the tail below the norm knee
            total += nrm**2 * self.coeff * _quad(
                lambda r: r ** (1.0 - self.alpha) * (
                    math.log(r) ** (-self.gamma) if self.gamma else 1.0),
                self.r0, cut)
            total += nrm * self._tail_integral(1.0, cut)
        else:
            total += nrm * self._tail_integral(1.0, self.r0)
        return total

    def xlogx_moment(self) -> float:
        """integral_{r >= 1} r ln(r) rho(r) dr; <1,z> = r since direction sums to 1."""
        if not (self.alpha > 1.0 or (self.alpha == 1.0 and self.gamma > 2.0)):
            return math.inf
        value = self.coeff * power_log_tail_integral(
            -self.alpha, 1.0 - self.gamma, max(self.r0, 1.0)
        )
        if self.small_coeff > 0 and self.r0 > 1.0:
            value += self.small_coeff * _quad(
                lambda r: r * math.log(r) * r ** (-1.0 - self.small_beta), 1.0, self.r0
            )
        return value

    def psi_integral(self, u: np.ndarray) -> float:
        """integral (exp(-a r) - 1 + a r) rho(r) dr with a = <u, direction>."""
        a = float(u @ self.direction)
        if a == 0.0:
            return 0.0
        if a < 0.0:
            raise MechanismError("psi integrand diverges for negative arguments")

        def h(r):
            ar = a * r
            return math.expm1(-ar) + ar

        total = 0.0
        if self.small_coeff > 0:
            total += self._small_integral_of(h)
        total += self._tail_integral_of(h, decay_to_linear=a)
        return total

    def theta_integral_factor(self, a: float) -> float:
        """integral r (exp(-a r) - 1) rho(r) dr (nonpositive), a = <v, direction>."""
        if a == 0.0:
            return 0.0

        def h(r):
            return r * math.expm1(-a * r)

        total = 0.0
        if self.small_coeff > 0:
            total += self._small_integral_of(h)
        total += self._tail_integral_of(h, decay_to_linear=a)
        return total

    def _small_integral_of(self, h) -> float:
        return _quad(lambda r: h(r) * self.small_coeff * r ** (-1.0 - self.small_beta),
                     0.0, self.r0)

    def _tail_integral_of(self, h, decay_to_linear: float) -> float:
        """Quadrature of h * rho_tail on (r0, inf), split at the shape knee 1/a."""
        def f(r):
            return h(r) * self.coeff * r ** (-1.0 - self.alpha) * (
                math.log(r) ** (-self.gamma) if self.gamma else 1.0
            )

        split = max(self.r0, 1.0, 1.0 / decay_to_linear if decay_to_linear > 0 else 1.0)
        return _quad(f, self.r0, split) + _quad(f, split, np.inf)

    # -- sampling -----------------------------------------------------------

    @cached_property
    def tail_mass(self) -> float:
        return self._tail_integral(0.0, 0.0)

    def retained_intensity(self, eps: float) -> float:
        """Total rate of jumps with radius > eps."""
        if self.is_infinite_activity and eps <= 0:
            raise MechanismError("infinite-activity measures need a truncation radius > 0")
        return self._small_integral(0.0, eps, self.r0) + self._tail_integral(0.0, eps)

    def retained_first_moment(self, eps: float) -> np.ndarray:
        m = self._small_integral(1.0, eps, self.r0) + self._tail_integral(1.0, eps)
        return m * self.direction

    def small_jump_compensation(self, eps: float) -> np.ndarray:
        """Per-unit-time mean of jumps dropped below eps (may be inf for beta >= 1)."""
        return self._small_integral(1.0, 0.0, min(eps, self.r0)) * self.direction

    def dropped_variance_rate(self, eps: float) -> float:
        """Second radial moment of the dropped small jumps, times ||direction||**2."""
        second = self._small_integral(2.0, 0.0, min(eps, self.r0))
        return second * float(np.linalg.norm(self.direction) ** 2)

    def sample_radii(self, n: int, eps: float, rng: np.random.Generator) -> np.ndarray:
        """Exact draws of the radius restricted to r > eps."""
        if n == 0:
            return np.zeros(0)
        upper = math.inf
        if eps >= upper:
            raise MechanismError("truncation radius is at or above the support bound")
        mass_small = self._small_integral(0.0, eps, self.r0)
        lo_tail = max(eps, self.r0)
        mass_tail = self._tail_integral(0.0, eps)
        total = mass_small + mass_tail
        if total <= 0:
            raise MechanismError("no retained jump mass above the truncation radius")
        n_small = int(rng.binomial(n, mass_small / total)) if mass_small > 0 else 0
        out = np.empty(n)
        if n_small:
            out[:n_small] = self._sample_small(n_small, max(eps, 0.0), rng)
        if n - n_small:
            out[n_small:] = self._sample_tail(n - n_small, lo_tail, rng)
        return rng.permuted(out)

    def _sample_small(self, n: int, lo: float, rng) -> np.ndarray:
        # inverse CDF of r**-(1+beta) on (lo, r0]
        b = self.small_beta
        u = rng.random(n)
        lo_pow, hi_pow = lo ** (-b), self.r0 ** (-b)
        return (lo_pow - u * (lo_pow - hi_pow)) ** (-1.0 / b)

    def _sample_tail(self, n: int, lo: float, rng) -> np.ndarray:
        if self.gamma == 0.0:
            # exact inverse CDF of the pure power tail; 1 - u lies in (0, 1]
            return lo * (1.0 - rng.random(n)) ** (-1.0 / self.alpha)
        # exact rejection from the power envelope; acceptance (ln lo / ln r)**gamma
        out = np.empty(n)
        have = 0
        log_lo = math.log(lo)
        while have < n:
            m = max(2 * (n - have), 16)
            prop = lo * (1.0 - rng.random(m)) ** (-1.0 / self.alpha)
            acc = rng.random(m) <= (log_lo / np.log(prop)) ** self.gamma
            taken = prop[acc][: n - have]
            out[have : have + taken.size] = taken
            have += taken.size
        return out

    def sample_jumps(self, n: int, eps: float, rng: np.random.Generator) -> np.ndarray:
        return np.outer(self.sample_radii(n, eps, rng), self.direction)

    def sample_size_biased(self, n: int, j: int, rng: np.random.Generator) -> np.ndarray:
        """Draw from z_j mu(dz) / integral z_j mu(dz); radius law r rho(r)/m."""
        if self.direction[j] <= 0:
            raise MechanismError(f"measure puts no mass on coordinate {j}")
        m_small = self._small_integral(1.0, 0.0, self.r0)
        if math.isinf(m_small):
            raise MechanismError("size-biased law undefined: infinite small-jump first moment")
        m_tail = self._tail_integral(1.0, 0.0)
        total = m_small + m_tail
        n_small = int(rng.binomial(n, m_small / total)) if m_small > 0 else 0
        radii = np.empty(n)
        if n_small:
            # density ~ r**-beta on (0, r0]; exact inverse CDF (beta < 1 here)
            e = 1.0 - self.small_beta
            radii[:n_small] = (rng.random(n_small) * self.r0**e) ** (1.0 / e)
        if n - n_small:
            radii[n_small:] = self._sample_tail_size_biased(n - n_small, rng)
        return np.outer(rng.permuted(radii), self.direction)

    def _sample_tail_size_biased(self, n: int, rng) -> np.ndarray:
        # density ~ r**-alpha (ln r)**-gamma on (r0, inf)
        if self.alpha > 1.0 and self.gamma == 0.0:
            return self.r0 * (1.0 - rng.random(n)) ** (-1.0 / (self.alpha - 1.0))
        if self.alpha == 1.0:
            # survival (ln r / ln r0)**(1-gamma), gamma > 1: exact inverse, with
            # the exponent capped at the float64 ceiling (draws this law does
            # produce values beyond 1e300)
            expo = math.log(self.r0) * (1.0 - rng.random(n)) ** (1.0 / (1.0 - self.gamma))
            return np.exp(np.minimum(expo, 700.0))
        out = np.empty(n)
        have = 0
        log_lo = math.log(self.r0)
        while have < n:
            m = max(2 * (n - have), 16)
            prop = self.r0 * (1.0 - rng.random(m)) ** (-1.0 / (self.alpha - 1.0))
            acc = rng.random(m) <= (log_lo / np.log(prop)) ** self.gamma
            taken = prop[acc][: n - have]
            out[have : have + taken.size] = taken
            have += taken.size
        return out


# ---------------------------------------------------------------------------
# Mechanism
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class XlogxVerdict:
    """Outcome of the big-jump x log x integrability check."""

    holds: bool
    per_type: tuple[float, ...]  # I_i, possibly inf


@dataclass(frozen=True)
class BranchingMechanism:
    """A validated d-type branching mechanism (immutable after construction)."""

    d: int
    c: np.ndarray                     # (d,) diffusion coefficients, >= 0
    b: np.ndarray                     # (d, d) effective drift matrix
    measures: tuple                   # d jump measures
    b_tilde: np.ndarray | None = None # raw drift, if the mechanism was built from it

    def __post_init__(self):
        for arr in (self.c, self.b, self.b_tilde):
            if arr is not None:
                arr.setflags(write=False)

    # -- constructors -------------------------------------------------------

    @classmethod
    def from_b_tilde(cls, b_tilde, c, measures) -> "BranchingMechanism":
        """Build from the raw drift matrix; the effective drift is derived."""
        b_tilde = np.array(b_tilde, dtype=float)
        d = b_tilde.shape[0]
        c, measures = cls._common_checks(d, b_tilde, c, measures)
        off = b_tilde[~np.eye(d, dtype=bool)]
        if np.any(off < 0):
            raise MechanismError("off-diagonal entries of the raw drift must be nonnegative")
        b = convert_drift(b_tilde, measures)
        return cls(d=d, c=c, b=b, measures=measures, b_tilde=b_tilde)

    @classmethod
    def from_b(cls, b, c, measures) -> "BranchingMechanism":
        """Build from the effective drift directly.

        The cross moment bound ``integral z_i mu_j <= B_ij`` (i != j) becomes a
        hard precondition here, since no raw drift is available to derive it.
        """
        b = np.array(b, dtype=float)
        d = b.shape[0]
        c, measures = cls._common_checks(d, b, c, measures)
        for j, mu in enumerate(measures):
            m = mu.first_moment()
            for i in range(d):
                if i != j and m[i] > b[i, j] + 1e-12:
                    raise MechanismError(
                        f"cross moment integral z({i}) mu_{j} = {m[i]:.6g} exceeds "
                        f"B[{i},{j}] = {b[i, j]:.6g}"
                    )
        return cls(d=d, c=c, b=b, measures=measures, b_tilde=None)

    @staticmethod
    def _common_checks(d, mat, c, measures):
        if mat.shape != (d, d):
            raise MechanismError("drift matrix must be square")
        c = _as_vector(c, d, "c")
        _check_nonnegative(c, "diffusion coefficients")
        measures = tuple(measures)
        if len(measures) != d:
            raise MechanismError(f"need {d} measures, got {len(measures)}")
        for i, mu in enumerate(measures):
            if mu.dimension != d:
                raise MechanismError(f"measure {i} has dimension {mu.dimension}, expected {d}")
            if not math.isfinite(mu.truncated_second_moment()):
                raise MechanismError(f"measure {i}: truncated second moment diverges")
            m = mu.first_moment()
            for j in range(d):
                if j != i and not math.isfinite(m[j]):
                    raise MechanismError(
                        f"measure {i}: cross first moment integral z({j}) mu_{i} diverges"
                    )
        return c, measures

    # -- evaluation ---------------------------------------------------------

    def psi(self, u) -> np.ndarray:
        """psi(u) componentwise; u must be in the nonnegative orthant."""
        u = _as_vector(u, self.d, "u")
        _check_nonnegative(u, "u")
        return self._psi_unchecked(u)

    def _psi_unchecked(self, u: np.ndarray) -> np.ndarray:
        out = -(self.b.T @ u) + self.c * u * u
        for i, mu in enumerate(self.measures):
            out[i] += mu.psi_integral(u)
        return out

    def first_moment_matrix(self) -> np.ndarray:
        """F[i, j] = integral z_i mu_j(dz)."""
        f = np.zeros((self.d, self.d))
        for j, mu in enumerate(self.measures):
            f[:, j] = mu.first_moment()
        return f

    def check_xlogx(self) -> XlogxVerdict:
        values = tuple(mu.xlogx_moment() for mu in self.measures)
        return XlogxVerdict(holds=all(math.isfinite(v) for v in values), per_type=values)

    def validate(self) -> list[dict]:
        """Run every structural invariant; returns a report, never raises."""
        checks = []

        if self.b_tilde is not None:
            off = self.b_tilde[~np.eye(self.d, dtype=bool)]
            checks.append({
                "check": "off-diagonal sign of raw drift",
                "passed": bool(np.all(off >= 0)),
                "values": {"min_off_diagonal": float(off.min()) if off.size else 0.0},
            })

        fm = self.first_moment_matrix()
        mask = ~np.eye(self.d, dtype=bool)
        slack = self.b - fm
        checks.append({
            "check": "moment inequality integral z_i mu_j <= B_ij (i != j)",
            "passed": bool(np.all(slack[mask] >= -1e-12)),
            "values": {"min_slack": float(slack[mask].min()) if self.d > 1 else 0.0},
        })

        psi0 = self._psi_unchecked(np.zeros(self.d))
        checks.append({
            "check": "psi(0) = 0",
            "passed": bool(np.max(np.abs(psi0)) <= 1e-12),
            "values": {"max_abs": float(np.max(np.abs(psi0)))},
        })

        finite = [math.isfinite(mu.truncated_second_moment()) for mu in self.measures]
        checks.append({
            "check": "truncated second moments finite",
            "passed": all(finite),
            "values": {"per_type": [mu.truncated_second_moment() for mu in self.measures]},
        })

        cross_ok, cross = True, []
        for i, mu in enumerate(self.measures):
            m = mu.first_moment()
            s = float(sum(m[j] for j in range(self.d) if j != i))
            cross.append(s)
            cross_ok &= math.isfinite(s)
        checks.append({
            "check": "cross first moments finite",
            "passed": cross_ok,
            "values": {"per_type": cross},
        })
        return checks


# ---------------------------------------------------------------------------
# Operation-style wrappers
# ---------------------------------------------------------------------------

def convert_drift(b_tilde, measures) -> np.ndarray:
    """Effective drift: B_ij = Btilde_ij + integral (z_i - delta_ij)^+ mu_j(dz)."""
    b_tilde = np.asarray(b_tilde, dtype=float)
    d = b_tilde.shape[0]
    b = b_tilde.copy()
    for j, mu in enumerate(measures):
        m = mu.first_moment()
        for i in range(d):
            add = mu.diagonal_excess_moment(i) if i == j else m[i]
            if not math.isfinite(add):
                raise MechanismError(
                    f"drift conversion needs a finite moment integral z({i}) mu_{j}"
                )
            b[i, j] += add
    return b


def evaluate_psi(mech: BranchingMechanism, u) -> np.ndarray:
    return mech.psi(u)


def measure_moment(measure, kind: str, i: int | None = None) -> float:
    """Dispatch on moment kind: ``first`` (coordinate i), ``truncated_second``, ``xlogx``."""
    if kind == "first":
        if i is None:
            raise ValueError("first moment needs a coordinate index")
        return float(measure.first_moment()[i])
    if kind == "truncated_second":
        return measure.truncated_second_moment()
    if kind == "xlogx":
        return measure.xlogx_moment()
    raise ValueError(f"unknown moment kind {kind!r}")


def check_xlogx(mech: BranchingMechanism) -> XlogxVerdict:
    return mech.check_xlogx()


def validate(mech: BranchingMechanism) -> list[dict]:
    return mech.validate()


def sample_jump(measure, rng: np.random.Generator, eps: float = 0.0):
    """Draw one jump with radius above ``eps``; also return the per-unit-time
    mean vector of the discarded small jumps (the drift compensation summary)."""
    z = measure.sample_jumps(1, eps, rng)[0]
    return z, measure.small_jump_compensation(eps)
