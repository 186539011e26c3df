"""Random walks driven by a coefficient sample, and what they estimate.

At site x the walk jumps to x +- e_i with probability a_i(x)/2; rows of
the kernel sum to one, and the +-e_i rates match, so every coordinate is
a martingale. One step of one walk consumes one counter-driven uniform
keyed by (seed, walk index, step), which makes paths reproducible and
independent of evaluation order; holding times for the continuous-time
mode use a second slot of the same key, so the embedded jump chain is
identical to the discrete walk with the same seed.

Three estimators of the effective diagonal live here or lean on this
module: the endpoint second moment per step (qclt_estimate), the running
average of a_i along the trajectory (chain_average_a), and, for
cross-checking the stationary law, normalized occupation counts
(occupation_density) against the adjoint-solve invariant density.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .environment import EnvironmentField, _hash_coords, _uniforms
from .lattice import GridDomain, GridFunction

__all__ = [
    "WalkSummary",
    "QcltEstimate",
    "WindowExitError",
    "simulate",
    "qclt_estimate",
    "chain_average_a",
    "occupation_density",
]

_TAG_WALK = np.uint64(0x9B97A1D2C44D5E17)


class WindowExitError(RuntimeError):
    """A walk left the finite window it was confined to."""


@dataclass
class WalkSummary:
    """One path: endpoint, per-site visit counts, and moment accumulators."""

    steps: int
    start: np.ndarray
    endpoint: np.ndarray
    occupation: np.ndarray | None     # flat counts per torus site, or None
    displacement_moments: np.ndarray  # (d, d) outer product of displacement
    jump_counts: np.ndarray           # (2d,) jumps per direction +e1,-e1,...
    mode: str
    time: float | None = None         # continuous mode: the time horizon


@dataclass
class QcltEstimate:
    """Endpoint covariance per step over an ensemble of walks."""

    covariance: np.ndarray       # (d, d)
    n_walks: int
    horizon: int
    standard_errors: np.ndarray  # (d, d) entrywise, across walks
    endpoints: np.ndarray        # (n_walks, d) unwrapped endpoints
    horizon_warning: bool        # horizon below L^2: torus not yet mixed


def _run_walks(env: EnvironmentField, starts: np.ndarray, horizon: int,
               seed: int, walk_indices: np.ndarray,
               occupation_sites: int | None = None,
               collect_a_from: int | None = None,
               window: int | None = None):
    """Advance all walks horizon steps; returns what the callers aggregate.

    Each step of walk w draws one uniform from the (seed, w, step)
    counter key, so any partition of walks over calls yields the same
    paths. Occupation counts wrapped (post-jump) sites; a-collection
    sums a_i at pre-jump sites from collect_a_from onward.
    """
    n, d = starts.shape
    pos = starts.astype(np.int64).copy()
    rows = np.arange(n)
    widx = np.asarray(walk_indices, dtype=np.int64)
    occ = None
    if occupation_sites is not None:
        if env.geometry is None:
            raise ValueError("occupation counts need a torus-periodized sample")
        occ = np.zeros(occupation_sites, dtype=np.int64)
        L = int(env.geometry)
        shape = (L,) * d
    jump_counts = np.zeros((n, 2 * d), dtype=np.int64)
    a_sums = None
    if collect_a_from is not None:
        a_sums = np.zeros((n, d))
    confined = window is not None and env.geometry is None
    for step in range(horizon):
        kern = env.kernel(pos)
        if a_sums is not None and step >= collect_a_from:
            a_sums += 2.0 * kern[:, ::2]
        key = _hash_coords(
            seed, _TAG_WALK,
            np.stack([widx, np.full(n, step, dtype=np.int64)], axis=1))
        u = _uniforms(key, 0)
        cum = np.cumsum(kern, axis=1)
        choice = (cum < u[:, None]).sum(axis=1)
        np.minimum(choice, 2 * d - 1, out=choice)  # cumsum rounding guard
        pos[rows, choice >> 1] += 1 - 2 * (choice & 1)
        jump_counts[rows, choice] += 1
        if occ is not None:
            flat = np.ravel_multi_index(tuple((pos % L).T), shape)
            occ += np.bincount(flat, minlength=occupation_sites)
        if confined and np.any(np.abs(pos) > window):
            raise WindowExitError(
                f"walk left the window of half-width {window} at step {step}")
    return pos, occ, jump_counts, a_sums


def _continuous_step_count(seed: int, walk_index: int, horizon: float) -> int:
    """Jumps of a rate-1 clock by time `horizon` (holding times Exp(1))."""
    if horizon < 0:
        raise ValueError("continuous horizon must be nonnegative")
    total = 0.0
    count = 0
    block = max(64, int(horizon + 6.0 * np.sqrt(horizon + 1.0)))
    while True:
        steps = np.arange(count, count + block, dtype=np.int64)
        key = _hash_coords(
            seed, _TAG_WALK,
            np.stack([np.full(block, walk_index, dtype=np.int64), steps],
                     axis=1))
        holds = -np.log1p(-_uniforms(key, 1))
        cum = total + np.cumsum(holds)
        if cum[-1] > horizon:
            return count + int(np.searchsorted(cum, horizon, side="right"))
        total = float(cum[-1])
        count += block


def simulate(env: EnvironmentField, start, horizon, mode: str = "discrete",
             seed: int = 0, walk_index: int = 0,
             window: int | None = None) -> WalkSummary:
    """Run one walk and summarize it.

    mode "discrete" takes exactly `horizon` steps; mode "continuous"
    runs the unit-rate clock up to time `horizon`, so the step count is
    Poisson distributed and the jump chain matches the discrete walk.
    On samples without torus geometry an optional window half-width
    confines the walk, raising WindowExitError on exit.
    """
    start = np.asarray(start, dtype=np.int64)
    if start.shape != (env.d,):
        raise ValueError(f"start must be a length-{env.d} site")
    if mode == "discrete":
        steps = int(horizon)
        if steps < 0:
            raise ValueError("horizon must be nonnegative")
        time = None
    elif mode == "continuous":
        steps = _continuous_step_count(seed, walk_index, float(horizon))
        time = float(horizon)
    else:
        raise ValueError(f"unknown walk mode {mode!r}")
    occupation_sites = None
    if env.geometry is not None:
        occupation_sites = int(env.geometry) ** env.d
    pos, occ, jump_counts, _ = _run_walks(
        env, start[None, :], steps, seed, np.array([walk_index]),
        occupation_sites=occupation_sites, window=window)
    endpoint = pos[0]
    disp = (endpoint - start).astype(np.float64)
    return WalkSummary(
        steps=steps,
        start=start,
        endpoint=endpoint,
        occupation=occ,
        displacement_moments=np.outer(disp, disp),
        jump_counts=jump_counts[0],
        mode=mode,
        time=time,
    )


def qclt_estimate(env: EnvironmentField, n_walks: int, horizon: int,
                  seed: int = 0, start=None) -> QcltEstimate:
    """Covariance of the endpoint per step, averaged over walks.

    All walks start at the same site (origin by default) on a
    torus-periodized sample; displacements are unwrapped. The warning
    flag is set when the horizon is below L^2, where the torus has not
    mixed and the estimate still remembers the start.
    """
    if env.geometry is None:
        raise ValueError("qclt_estimate needs a torus-periodized sample")
    if n_walks < 2:
        raise ValueError("need at least two walks for standard errors")
    if horizon < 1:
        raise ValueError("horizon must be positive")
    d = env.d
    if start is None:
        start = np.zeros(d, dtype=np.int64)
    starts = np.broadcast_to(np.asarray(start, dtype=np.int64),
                             (n_walks, d)).copy()
    pos, _, _, _ = _run_walks(env, starts, int(horizon), seed,
                              np.arange(n_walks))
    disp = (pos - starts).astype(np.float64)
    moments = disp[:, :, None] * disp[:, None, :] / float(horizon)
    covariance = moments.mean(axis=0)
    se = moments.std(axis=0, ddof=1) / np.sqrt(n_walks)
    return QcltEstimate(
        covariance=covariance,
        n_walks=int(n_walks),
        horizon=int(horizon),
        standard_errors=se,
        endpoints=pos.astype(np.float64),
        horizon_warning=bool(horizon < int(env.geometry) ** 2),
    )


def chain_average_a(env: EnvironmentField, n_walks: int, horizon: int,
                    seed: int = 0, burn_in: int = 0, start=None):
    """Trajectory average of a_i, the environment seen from the walker.

    Returns (mean, se): the average of a_i(X_t) over t in [burn_in,
    horizon) and all walks, with across-walk standard errors. Converges
    to the density-weighted average of a_i.
    """
    if not 0 <= burn_in < horizon:
        raise ValueError("need 0 <= burn_in < horizon")
    d = env.d
    if start is None:
        start = np.zeros(d, dtype=np.int64)
    starts = np.broadcast_to(np.asarray(start, dtype=np.int64),
                             (n_walks, d)).copy()
    _, _, _, a_sums = _run_walks(env, starts, int(horizon), seed,
                                 np.arange(n_walks),
                                 collect_a_from=int(burn_in))
    per_walk = a_sums / float(horizon - burn_in)
    mean = per_walk.mean(axis=0)
    if n_walks > 1:
        se = per_walk.std(axis=0, ddof=1) / np.sqrt(n_walks)
    else:
        se = np.full(d, np.nan)
    return mean, se


def occupation_density(summary: WalkSummary, torus: GridDomain) -> GridFunction:
    """Visit frequencies as a unit-mass density on the torus."""
    if torus.kind != "torus":
        raise ValueError("occupation density lives on a torus")
    if summary.occupation is None:
        raise ValueError("summary carries no occupation counts")
    if summary.steps == 0:
        raise ValueError("zero-step walk has no occupation density")
    if summary.occupation.shape[0] != torus.n_sites:
        raise ValueError("occupation counts do not match the torus size")
    return GridFunction(torus, summary.occupation / float(summary.steps))
