"""Jump-diffusion path simulation of the branching process.

The state follows the SDE scheme, per step of length ``dt`` and per type i:

* drift            ``B X dt`` (explicit Euler),
* diffusion        ``sqrt(2 c_i X_i) dW_i`` with independent Brownian drivers,
* jumps            a Poisson number of jumps with the intensity
                   ``X_i * Lambda_i(eps)`` frozen at the step start, where
                   ``Lambda_i(eps)`` is the retained jump rate above the
                   truncation radius ``eps``,
* compensation     ``- X_i * m_i(eps) dt`` with ``m_i`` the retained first
                   moment, because the SDE drives jumps through the
                   compensated random measure,
* clamping         coordinates pushed below zero are absorbed at zero and
                   counted.

Jumps below ``eps`` are dropped together with their compensator (zero mean
net effect); their second-moment rate is accumulated as the recorded
variance bias of the run.

Randomness is organized in counter-based streams: the ensemble of paths is
partitioned into fixed-size blocks and block ``k`` draws from
``Philox(key=[seed, k])``, so results are bit-identical no matter how blocks
are scheduled across workers.  A block of size one is an individually
reproducible path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mechanism import AtomicMeasure, BranchingMechanism, RadialMeasure, _as_vector, \
    _check_nonnegative
from .spectral import SpectralData

__all__ = ["SimulationError", "SimConfig", "PathResult", "BlockResult",
           "block_rng", "simulate_block", "simulate_path", "track_martingale",
           "detect_extinction"]


class SimulationError(RuntimeError):
    """State became non-finite or exceeded sanity bounds during stepping."""


@dataclass(frozen=True)
class SimConfig:
    """Stepping, truncation and reproducibility knobs for one run."""

    horizon: float
    dt: float = 1e-3
    eps_jump: float = 1e-3
    seed: int = 0
    extinction_threshold: float = 1e-12
    grid_stride: int = 1
    block_size: int = 512      # paths per counter-based RNG block

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.horizon < self.dt:
            raise ValueError("horizon must be at least one step")
        if self.eps_jump <= 0:
            raise ValueError("eps_jump must be positive")
        if self.grid_stride < 1 or self.block_size < 1:
            raise ValueError("grid_stride and block_size must be >= 1")

    @property
    def n_steps(self) -> int:
        return max(1, round(self.horizon / self.dt))

    def step_of_time(self, t: float) -> int:
        """Grid index of time ``t``; must sit on the grid."""
        k = round(t / self.dt)
        if not math.isclose(k * self.dt, t, rel_tol=0, abs_tol=1e-9):
            raise ValueError(f"time {t} is not on the dt = {self.dt} grid")
        if not 0 <= k <= self.n_steps:
            raise ValueError(f"time {t} outside the horizon")
        return k


def block_rng(seed: int, block_index: int, stream: int = 0) -> np.random.Generator:
    """Counter-based stream for one path block: Philox keyed by (seed, block).

    ``stream`` separates estimators that share a seed (each owns a window of
    2**32 block indices), so their draws never overlap.
    """
    if not 0 <= block_index < 2**32:
        raise ValueError("block index out of range")
    return np.random.Generator(np.random.Philox(key=[seed, stream * 2**32 + block_index]))


@dataclass(frozen=True)
class PathResult:
    """A single simulated trajectory on the (decimated) output grid."""

    t_grid: np.ndarray                     # (n_rec,)
    x: np.ndarray                          # (n_rec, d)
    w: np.ndarray | None                   # martingale series if spectral data given
    events: list                           # [(time, type index, jump vector), ...]
    extinction_time: float | None
    clamp_count: int
    dropped_jump_variance: float


@dataclass
class BlockResult:
    """States of a block of paths recorded at the requested grid times."""

    record_times: np.ndarray               # (n_rec,)
    x: np.ndarray                          # (n_rec, n_paths, d)
    extinct_step: np.ndarray               # (n_paths,) step index or -1
    clamp_count: int
    dropped_jump_variance: float
    events: list | None = None
    immigrant_count: np.ndarray | None = None


class _JumpSampler:
    """Per-type retained-jump machinery, precomputed once per (mechanism, eps)."""

    def __init__(self, mech: BranchingMechanism, eps: float):
        self.measures = mech.measures
        self.intensity = np.array([mu.retained_intensity(eps) for mu in mech.measures])
        self.mean = np.stack([mu.retained_first_moment(eps) for mu in mech.measures])
        self.dropped_var = float(sum(mu.dropped_variance_rate(eps) for mu in mech.measures))
        self.eps = eps
        self.atom_probs = []
        for mu in mech.measures:
            if isinstance(mu, AtomicMeasure):
                self.atom_probs.append(mu.rates / mu.total_rate)
            else:
                self.atom_probs.append(None)

    def draw(self, i: int, counts: np.ndarray, rng: np.random.Generator,
             events: list | None, t: float):
        """Total jump mass per path for type ``i`` given per-path counts.

        Returns an (n, d) array.  When ``events`` is given (single-path mode)
        each jump is materialized individually and appended as
        ``(t, i, z)``.
        """
        n = counts.shape[0]
        mu = self.measures[i]
        total = int(counts.sum())
        if total == 0:
            return 0.0
        if events is not None:
            zs = mu.sample_jumps(total, self.eps, rng)
            for z in zs:
                events.append((t, i, z))
            out = np.zeros((n, mu.dimension))
            np.add.at(out, np.repeat(np.arange(n), counts), zs)
            return out
        if isinstance(mu, AtomicMeasure):
            p = self.atom_probs[i]
            if len(p) == 1:
                return counts[:, None] * mu.atoms[0]
            split = rng.multinomial(counts, p)          # (n, n_atoms)
            return split @ mu.atoms
        radii = mu.sample_radii(total, self.eps, rng)   # type: ignore[union-attr]
        r_sum = np.zeros(n)
        np.add.at(r_sum, np.repeat(np.arange(n), counts), radii)
        return np.outer(r_sum, mu.direction)


def simulate_block(mech: BranchingMechanism, x0, config: SimConfig,
                   rng: np.random.Generator, n_paths: int,
                   record_times=None, record_events: bool = False,
                   inject=None) -> BlockResult:
    """Step a block of paths jointly; the workhorse behind every ensemble.

    ``inject(step, state, rng)`` may return an (n_paths, d) array of mass to
    add after the dynamics of that step (used for spine immigration); it is
    called on every step and draws from the same stream, preserving
    reproducibility.
    """
    x0 = _as_vector(x0, mech.d, "x0")
    _check_nonnegative(x0, "x0")
    if record_events and n_paths != 1:
        raise ValueError("event recording is only supported for single paths")

    d = mech.d
    dt = config.dt
    n_steps = config.n_steps
    if record_times is None:
        rec_steps = np.arange(0, n_steps + 1, config.grid_stride)
        if rec_steps[-1] != n_steps:
            rec_steps = np.append(rec_steps, n_steps)
    else:
        rec_steps = np.array(sorted({config.step_of_time(t) for t in record_times}))
    rec_lookup = {int(s): k for k, s in enumerate(rec_steps)}

    sampler = _JumpSampler(mech, config.eps_jump)
    sqrt_2c_dt = np.sqrt(2.0 * mech.c * dt)
    comp = sampler.mean * dt                      # (d_types, d) per-unit-state compensator
    events: list | None = [] if record_events else None

    x = np.tile(x0, (n_paths, 1))
    alive = np.ones(n_paths, dtype=bool)
    extinct_step = np.full(n_paths, -1, dtype=np.int64)
    if float(x0.sum()) < config.extinction_threshold:
        alive[:] = False
        extinct_step[:] = 0
        x[:] = 0.0

    out = np.empty((len(rec_steps), n_paths, d))
    if 0 in rec_lookup:
        out[rec_lookup[0]] = x
    clamp_count = 0
    dropped_var = 0.0

    for step in range(n_steps):
        t_next = (step + 1) * dt
        if alive.any():
            xa = x[alive]
            drift = dt * (xa @ mech.b.T)
            noise = sqrt_2c_dt * np.sqrt(xa) * rng.standard_normal(xa.shape)
            incr = drift + noise
            for i in range(d):
                lam_i = sampler.intensity[i]
                if lam_i > 0.0:
                    counts = rng.poisson(xa[:, i] * (lam_i * dt))
                    incr += sampler.draw(i, counts, rng, events, t_next)
                    incr -= np.outer(xa[:, i], comp[i])
            x_new = xa + incr
            if not np.all(np.isfinite(x_new)):
                raise SimulationError(f"non-finite state at step {step + 1}")
            below = x_new < 0
            clamp_count += int(below.sum())
            np.maximum(x_new, 0.0, out=x_new)
            x[alive] = x_new
            dropped_var += float(xa.sum()) * sampler.dropped_var * dt

        if inject is not None:
            add = inject(step, x, rng)
            if add is not None:
                x += add

        mass = x.sum(axis=1)
        died = alive & (mass < config.extinction_threshold)
        if died.any():
            x[died] = 0.0
            extinct_step[died] = step + 1
            alive &= ~died
        newly_alive = ~alive & (mass >= config.extinction_threshold) & (extinct_step >= 0)
        if inject is not None and newly_alive.any():
            alive |= newly_alive          # immigration can revive a path
            extinct_step[newly_alive] = -1

        k = rec_lookup.get(step + 1)
        if k is not None:
            out[k] = x

    return BlockResult(
        record_times=rec_steps * dt,
        x=out,
        extinct_step=extinct_step,
        clamp_count=clamp_count,
        dropped_jump_variance=dropped_var,
        events=events,
    )


def simulate_path(mech: BranchingMechanism, x0, config: SimConfig,
                  rng: np.random.Generator | None = None,
                  spectral: SpectralData | None = None) -> PathResult:
    """One fully logged trajectory (block of size one)."""
    if rng is None:
        rng = block_rng(config.seed, 0)
    block = simulate_block(mech, x0, config, rng, 1, record_events=True)
    x = block.x[:, 0, :]
    w = None
    if spectral is not None:
        w = track_martingale_series(block.record_times, x, spectral)
    ext = None
    if block.extinct_step[0] >= 0:
        ext = float(block.extinct_step[0] * config.dt)
    return PathResult(
        t_grid=block.record_times, x=x, w=w, events=block.events or [],
        extinction_time=ext, clamp_count=block.clamp_count,
        dropped_jump_variance=block.dropped_jump_variance,
    )


def track_martingale_series(t_grid: np.ndarray, x: np.ndarray,
                            spectral: SpectralData) -> np.ndarray:
    """``W_t = exp(-lambda1 t) <phi, X_t>`` along a recorded trajectory."""
    return np.exp(-spectral.lambda1 * t_grid) * (x @ spectral.phi)


def track_martingale(path: PathResult, spectral: SpectralData) -> np.ndarray:
    return track_martingale_series(path.t_grid, path.x, spectral)


def detect_extinction(path: PathResult, threshold: float = 1e-12) -> float | None:
    """First recorded time with total mass below ``threshold``, if any."""
    mass = path.x.sum(axis=1)
    hits = np.nonzero(mass < threshold)[0]
    return float(path.t_grid[hits[0]]) if hits.size else None
