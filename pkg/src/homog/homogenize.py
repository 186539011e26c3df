"""Correctors, effective tensors, reflection pairing, and growth profiles.

First-order correctors v^k and xi solve, on a torus,

    L v^k = (a_k - abar_k)/2,        L xi = psi - psibar,

where abar_k and psibar are invariant-density-weighted averages: the
density spans the left kernel of L, so exactly these right sides are
solvable. Flux fields

    lam^k_j(x) = a_j(x) [v^k(x+e_j) - v^k(x-e_j)]

average (with the same weights) to the centered third-order tensor
entries lambar^k_j; reflecting the coefficient sample flips the sign of
these estimates exactly, which is the mechanism that kills the tensor in
expectation for reflection-symmetric laws. Higher-order correctors
re-correct the flux fluctuations,

    L p^k_j = lam^k_j - lambar^k_j,      L s_j = eta_j - etabar_j,

solved either stationarily (torus, mean-centered) or localized (killed
box problem with zero outer boundary).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .environment import (
    DistributionSpec,
    EnvironmentField,
    PsiSpec,
    psi_eval,
    sample_environment,
)
from .lattice import GridDomain, GridFunction, build_torus
from .operator import assemble_killed, assemble_resolvent, assemble_torus_operator
from .solver import SolveResult, SolverConfig, invariant_density, solve_iterative

__all__ = [
    "CorrectorSet",
    "TensorStats",
    "EnsembleStats",
    "solve_corrector",
    "compute_correctors",
    "flux_grids",
    "weighted_mean",
    "tensor_stats",
    "effective_stats",
    "reflected_stats_pair",
    "higher_corrector_stationary",
    "higher_corrector_local",
    "green_total_mass",
    "amplitude",
]

# right sides below this fraction of the field scale are rounding residue
# of the weighted centering, not data; solving for them would chase noise
_RHS_FLOOR = 1e-14


def solve_corrector(env: EnvironmentField, torus: GridDomain, rhs: np.ndarray,
                    config: SolverConfig | None = None):
    """Solve L u = rhs on the torus and mean-center the solution.

    rhs must be compatible (density-weighted mean zero); the Krylov solve
    from the zero start then never excites the constant kernel direction,
    and centering removes what rounding lets through.
    """
    prob = assemble_torus_operator(env, torus, rhs)
    res = solve_iterative(prob, config)
    centered = res.values - res.values.mean()
    return GridFunction(torus, centered), res


@dataclass
class CorrectorSet:
    """Correctors and the weights that made their equations solvable."""

    env: EnvironmentField
    torus: GridDomain
    density: GridFunction
    a_bar: np.ndarray                 # (d,) weighted average of a_i
    psi_bar: float
    v: dict                           # axis k -> GridFunction
    xi: GridFunction
    psi_spec: PsiSpec
    results: dict = field(default_factory=dict)  # label -> SolveResult


def compute_correctors(env: EnvironmentField, torus: GridDomain,
                       psi_spec: PsiSpec | None = None,
                       config: SolverConfig | None = None,
                       density: GridFunction | None = None,
                       ks=None) -> CorrectorSet:
    """Solve the corrector equations for the axes in ks (default: all)."""
    if psi_spec is None:
        psi_spec = PsiSpec()
    if density is None:
        density = invariant_density(env, torus, config)
    d = torus.d
    if ks is None:
        ks = range(d)
    m = density.grid_view()
    a = env.a_axis_grids(torus.shape)
    a_bar = np.array([float((m * a[k]).sum()) for k in range(d)])
    results = {}
    v = {}
    for k in ks:
        rhs = 0.5 * (a[k] - a_bar[k])
        if np.max(np.abs(rhs)) < _RHS_FLOOR * max(1.0, np.max(np.abs(a[k]))):
            rhs = np.zeros_like(rhs)
        v[k], results[f"v{k + 1}"] = solve_corrector(env, torus, rhs, config)
    psi = psi_eval(env, torus.coords, psi_spec)
    psi_bar = float(density.values @ psi)
    rhs_xi = (psi - psi_bar).reshape(torus.shape)
    if np.max(np.abs(rhs_xi)) < _RHS_FLOOR * max(1.0, np.max(np.abs(psi))):
        rhs_xi = np.zeros_like(rhs_xi)
    xi, results["xi"] = solve_corrector(env, torus, rhs_xi, config)
    return CorrectorSet(env, torus, density, a_bar, psi_bar, v, xi,
                        psi_spec, results)


def flux_grids(env: EnvironmentField, torus: GridDomain,
               fld: GridFunction) -> list:
    """Centered-difference flux a_j(x)[u(x+e_j) - u(x-e_j)], per axis."""
    a = env.a_axis_grids(torus.shape)
    g = fld.grid_view()
    return [a[j] * (np.roll(g, -1, axis=j) - np.roll(g, 1, axis=j))
            for j in range(torus.d)]


def weighted_mean(density: GridFunction, grid: np.ndarray) -> float:
    return float((density.grid_view() * grid).sum())


@dataclass
class TensorStats:
    """Per-sample effective quantities from one torus."""

    lam: np.ndarray      # (d, d): lam[k, j], flux tensor of corrector v^k
    eta: np.ndarray      # (d,)
    a_bar: np.ndarray    # (d,)
    psi_bar: float


def tensor_stats(cs: CorrectorSet) -> TensorStats:
    d = cs.torus.d
    if set(cs.v) != set(range(d)):
        raise ValueError("tensor statistics need all d correctors")
    lam = np.zeros((d, d))
    for k in range(d):
        fl = flux_grids(cs.env, cs.torus, cs.v[k])
        for j in range(d):
            lam[k, j] = weighted_mean(cs.density, fl[j])
    fe = flux_grids(cs.env, cs.torus, cs.xi)
    eta = np.array([weighted_mean(cs.density, fe[j]) for j in range(d)])
    return TensorStats(lam, eta, cs.a_bar.copy(), cs.psi_bar)


@dataclass
class EnsembleStats:
    """Tensor statistics stacked across seeds, with mean and standard error."""

    seeds: np.ndarray
    lam: np.ndarray      # (n, d, d)
    eta: np.ndarray      # (n, d)
    a_bar: np.ndarray    # (n, d)
    psi_bar: np.ndarray  # (n,)

    @staticmethod
    def _se(arr: np.ndarray) -> np.ndarray:
        n = arr.shape[0]
        if n < 2:
            return np.full(arr.shape[1:], np.nan)
        return arr.std(axis=0, ddof=1) / np.sqrt(n)

    @property
    def lam_mean(self) -> np.ndarray:
        return self.lam.mean(axis=0)

    @property
    def lam_se(self) -> np.ndarray:
        return self._se(self.lam)

    @property
    def eta_mean(self) -> np.ndarray:
        return self.eta.mean(axis=0)

    @property
    def eta_se(self) -> np.ndarray:
        return self._se(self.eta)

    @property
    def a_bar_mean(self) -> np.ndarray:
        return self.a_bar.mean(axis=0)

    @property
    def a_bar_se(self) -> np.ndarray:
        return self._se(self.a_bar)


def effective_stats(spec: DistributionSpec, psi_spec: PsiSpec | None, d: int,
                    L: int, seeds, config: SolverConfig | None = None) -> EnsembleStats:
    """Tensor statistics over an ensemble of periodized samples."""
    seeds = list(seeds)
    lam = []
    eta = []
    a_bar = []
    psi_bar = []
    torus = build_torus(L, d)
    for seed in seeds:
        env = sample_environment(spec, seed, d, geometry=L)
        ts = tensor_stats(compute_correctors(env, torus, psi_spec, config))
        lam.append(ts.lam)
        eta.append(ts.eta)
        a_bar.append(ts.a_bar)
        psi_bar.append(ts.psi_bar)
    return EnsembleStats(np.asarray(seeds), np.stack(lam), np.stack(eta),
                         np.stack(a_bar), np.asarray(psi_bar))


def reflected_stats_pair(spec: DistributionSpec, d: int, L: int, seed: int,
                         psi_spec: PsiSpec | None = None,
                         config: SolverConfig | None = None):
    """Tensor statistics of one sample and of its reflection through 0.

    The flux tensor estimators of the pair cancel exactly (up to solver
    tolerance): reflecting the sample maps v^k(x) to v^k(-x) and flips
    the centered differences' sign.
    """
    torus = build_torus(L, d)
    env = sample_environment(spec, seed, d, geometry=L)
    plain = tensor_stats(compute_correctors(env, torus, psi_spec, config))
    refl = tensor_stats(compute_correctors(env.reflect(), torus, psi_spec,
                                           config))
    return plain, refl


def higher_corrector_stationary(env: EnvironmentField, torus: GridDomain,
                                flux_grid: np.ndarray, flux_bar: float,
                                config: SolverConfig | None = None):
    """Stationary higher-order corrector: L p = flux - flux_bar on the torus."""
    return solve_corrector(env, torus, flux_grid - flux_bar, config)


def higher_corrector_local(env: EnvironmentField, R: float,
                           rhs_interior: np.ndarray,
                           box: GridDomain | None = None,
                           config: SolverConfig | None = None):
    """Localized higher-order corrector on a box covering the 4R ball.

    Solves (L - eta_R/R^2) p = rhs with zero outer boundary; inside the
    2R ball the kill rate vanishes, so L p = rhs holds there exactly.
    Returns the solution embedded with its boundary values.
    """
    prob = assemble_killed(env, R, rhs_interior, box)
    res = solve_iterative(prob, config)
    return prob.full_solution(res.values), res


def green_total_mass(env: EnvironmentField, torus: GridDomain, R: float,
                     config: SolverConfig | None = None):
    """Total mass sum_y of the damped kernel ((1/R^2) - L)^{-1} at the origin.

    The row sum is computed through one adjoint solve: q solving
    (1/R^2 - L^T) q = 1_0 has sum_x q(x) = sum_y kernel(0, y), and that
    mass equals R^2 identically because the operator kills constants at
    rate exactly 1/R^2. Deviation from R^2 measures solver plus adjoint
    assembly error, not discretization.
    """
    if config is None:
        config = SolverConfig(tol=1e-13)
    rhs = np.zeros(torus.n_sites)
    origin = int(torus.site_index(np.zeros(torus.d, dtype=np.int64)))
    rhs[origin] = 1.0
    prob = assemble_resolvent(env, torus, 1.0 / R ** 2, rhs, adjoint=True)
    res = solve_iterative(prob, config)
    return float(res.values.sum()), res


def amplitude(fld: GridFunction, radius: float | None = None,
              gradient: bool = False) -> float:
    """Max magnitude of a field (or its one-step gradient) within a radius.

    radius=None measures over the whole domain. Gradient amplitudes are
    implemented for torus fields, where wrapped differences make sense
    everywhere.
    """
    dom = fld.domain
    if gradient:
        if dom.kind != "torus":
            raise ValueError("gradient amplitude needs a torus field")
        g = fld.grid_view()
        mag = np.zeros(dom.shape)
        for i in range(dom.d):
            np.maximum(mag, np.abs(np.roll(g, -1, axis=i) - g), out=mag)
        vals = mag.ravel()
    else:
        vals = np.abs(fld.values)
    if radius is None:
        return float(vals.max())
    r = np.linalg.norm(dom.centered_coords(), axis=1)
    sel = r <= radius
    if not np.any(sel):
        raise ValueError(f"no sites within radius {radius}")
    return float(vals[sel].max())
