"""Experiment harness: manufactured-solution rate sweeps, tensor-vanishing
verification, two-scale expansion residuals, power-law fits, and
deterministic report emission.

The rate methodology is manufactured solutions: pick a polynomial ubar,
derive f = tr(abar D^2 ubar)/(2 psibar) so ubar solves the effective
equation exactly, impose g = ubar on the discrete boundary, and measure
max |u - ubar(./R)| against R. That isolates the homogenization error:
no continuum solver enters. For the coordinate-exchangeable coefficient
laws abar = I/d holds exactly, so f carries no estimation error either;
otherwise abar comes from a torus pre-run whose standard error is
reported as a floor on the measurable rate.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields

import numpy as np

from .environment import DistributionSpec, PsiSpec, psi_eval, sample_environment
from .homogenize import (
    compute_correctors,
    effective_stats,
    flux_grids,
    higher_corrector_local,
    reflected_stats_pair,
    tensor_stats,
    weighted_mean,
)
from .lattice import GridFunction, build_ball, build_box, build_torus
from .operator import apply_L, assemble_dirichlet, green_box_half_width
from .solver import SolverConfig, solve_iterative

__all__ = [
    "Polynomial",
    "ExperimentConfig",
    "ExperimentError",
    "RatePoint",
    "RateReport",
    "TensorReport",
    "ExpansionReport",
    "manufactured_source",
    "run_rate_experiment",
    "verify_tensors",
    "expansion_residual",
    "fit_powerlaw",
    "emit_report",
    "CSV_HEADER",
]

CSV_HEADER = "experiment,d,R,seed,error_max,error_l2,iters,residual,converged"

_BOOTSTRAP_SAMPLES = 2000
_BOOTSTRAP_SEED = 1789


class ExperimentError(RuntimeError):
    """An experiment cannot produce a trustworthy result."""


# -- polynomials ---------------------------------------------------------------

class Polynomial:
    """Multivariate polynomial by multi-index, degree capped at 4.

    The cap keeps every discrete second difference of ubar(./R) an exact
    finite Taylor expansion, so rate measurements see no uncontrolled
    remainder. Third derivatives are tabulated at construction; they feed
    the z right side and the higher-corrector terms.
    """

    MAX_DEGREE = 4

    def __init__(self, d: int, coeffs: dict):
        if d < 1:
            raise ValueError("dimension must be positive")
        self.d = int(d)
        clean = {}
        for idx, c in coeffs.items():
            key = tuple(int(e) for e in idx)
            if len(key) != self.d or any(e < 0 for e in key):
                raise ValueError(f"bad multi-index {idx!r} for d={d}")
            if sum(key) > self.MAX_DEGREE:
                raise ValueError(f"degree of {idx!r} exceeds {self.MAX_DEGREE}")
            c = float(c)
            if not np.isfinite(c):
                raise ValueError("coefficients must be finite")
            if c != 0.0:
                clean[key] = clean.get(key, 0.0) + c
        self.coeffs = {k: v for k, v in sorted(clean.items()) if v != 0.0}
        self.third = self._third_tensor()

    def _third_tensor(self) -> dict:
        out = {}
        for k in range(self.d):
            dkk = self._diff(self._diff(self.coeffs, k), k)
            for i in range(self.d):
                out[(k, i)] = self._diff(dkk, i)
        return out

    @staticmethod
    def _diff(coeffs: dict, axis: int) -> dict:
        out = {}
        for idx, c in coeffs.items():
            if idx[axis] == 0:
                continue
            nxt = list(idx)
            nxt[axis] -= 1
            out[tuple(nxt)] = out.get(tuple(nxt), 0.0) + c * idx[axis]
        return {k: v for k, v in out.items() if v != 0.0}

    def derivative(self, axis: int) -> "Polynomial":
        if not 0 <= axis < self.d:
            raise ValueError("axis out of range")
        return Polynomial(self.d, self._diff(self.coeffs, axis))

    def second_diag(self) -> list:
        """The pure second derivatives d^2/dx_k^2, as polynomials."""
        return [Polynomial(self.d, self._diff(self._diff(self.coeffs, k), k))
                for k in range(self.d)]

    def third_poly(self, k: int, i: int) -> "Polynomial":
        return Polynomial(self.d, dict(self.third[(k, i)]))

    @property
    def is_zero(self) -> bool:
        return not self.coeffs

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        single = points.ndim == 1
        if single:
            points = points[None, :]
        if points.shape[1] != self.d:
            raise ValueError("points have the wrong dimension")
        out = np.zeros(points.shape[0])
        for idx, c in self.coeffs.items():
            term = np.full(points.shape[0], c)
            for ax, e in enumerate(idx):
                if e:
                    term *= points[:, ax] ** e
            out += term
        return out[0] if single else out

    def to_json_dict(self) -> dict:
        return {
            "d": self.d,
            "coeffs": {",".join(map(str, k)): v for k, v in self.coeffs.items()},
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "Polynomial":
        coeffs = {tuple(int(s) for s in k.split(",")): v
                  for k, v in data["coeffs"].items()}
        return cls(int(data["d"]), coeffs)

    def __repr__(self) -> str:
        return f"Polynomial(d={self.d}, coeffs={self.coeffs!r})"


def manufactured_source(u_bar: Polynomial, a_bar: np.ndarray,
                        psi_bar: float) -> Polynomial:
    """The f that makes u_bar solve tr(abar D^2 u) / 2 = f psibar."""
    if psi_bar <= 0:
        raise ValueError("psi_bar must be positive")
    coeffs: dict = {}
    for k, dkk in enumerate(u_bar.second_diag()):
        for idx, c in dkk.coeffs.items():
            coeffs[idx] = coeffs.get(idx, 0.0) + 0.5 * float(a_bar[k]) * c
    return Polynomial(u_bar.d, {k: v / psi_bar for k, v in coeffs.items()})


# -- configuration -------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Everything a rate, tensor, walk, or expansion run needs.

    a_bar_mode "exchangeable-exact" uses abar = I/d (valid for laws whose
    coordinates are exchangeable, which covers the built-in ones);
    "estimate" runs a torus pre-estimate over stats_seeds seeds and
    propagates its standard error into the report.
    """

    d: int = 3
    R_list: tuple = (8, 16, 32)
    seeds_per_R: int = 8
    dist: DistributionSpec = field(default_factory=lambda: DistributionSpec("uniform-diagonal"))
    psi: PsiSpec = field(default_factory=PsiSpec)
    u_bar: Polynomial | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    torus_L: int = 16
    label: str = "experiment"
    base_seed: int = 0
    a_bar_mode: str = "exchangeable-exact"
    stats_seeds: int = 32
    pair_seeds: int = 8
    log_correction: bool = False
    max_slope: float | None = None
    min_degradation: float | None = None
    walk_n_walks: int = 2000
    walk_horizon: int = 2000
    walk_burn_in: int = 0

    def __post_init__(self):
        self.R_list = tuple(int(r) for r in self.R_list)
        if any(b <= a for a, b in zip(self.R_list, self.R_list[1:])):
            raise ValueError("R_list must be strictly increasing")
        if self.R_list and min(self.R_list) < 4:
            raise ValueError("rate experiments need R >= 4")
        if self.a_bar_mode not in ("exchangeable-exact", "estimate"):
            raise ValueError(f"unknown a_bar_mode {self.a_bar_mode!r}")
        if self.u_bar is not None and self.u_bar.d != self.d:
            raise ValueError("u_bar dimension does not match d")

    def to_json_dict(self) -> dict:
        return {
            "d": self.d,
            "R_list": list(self.R_list),
            "seeds_per_R": self.seeds_per_R,
            "dist": self.dist.to_json_dict(),
            "psi": self.psi.to_json_dict(),
            "u_bar": None if self.u_bar is None else self.u_bar.to_json_dict(),
            "solver": self.solver.to_json_dict(),
            "torus_L": self.torus_L,
            "label": self.label,
            "base_seed": self.base_seed,
            "a_bar_mode": self.a_bar_mode,
            "stats_seeds": self.stats_seeds,
            "pair_seeds": self.pair_seeds,
            "log_correction": self.log_correction,
            "max_slope": self.max_slope,
            "min_degradation": self.min_degradation,
            "walk": {
                "n_walks": self.walk_n_walks,
                "horizon": self.walk_horizon,
                "burn_in": self.walk_burn_in,
            },
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "ExperimentConfig":
        kwargs = dict(data)
        walk = kwargs.pop("walk", None)
        if walk is not None:
            kwargs["walk_n_walks"] = walk.get("n_walks", 2000)
            kwargs["walk_horizon"] = walk.get("horizon", 2000)
            kwargs["walk_burn_in"] = walk.get("burn_in", 0)
        unknown = set(kwargs) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        if "dist" in kwargs:
            kwargs["dist"] = DistributionSpec.from_json_dict(kwargs["dist"])
        if "psi" in kwargs:
            kwargs["psi"] = PsiSpec.from_json_dict(kwargs["psi"])
        if kwargs.get("u_bar") is not None:
            kwargs["u_bar"] = Polynomial.from_json_dict(kwargs["u_bar"])
        if "solver" in kwargs:
            kwargs["solver"] = SolverConfig.from_json_dict(kwargs["solver"])
        if "R_list" in kwargs:
            kwargs["R_list"] = tuple(kwargs["R_list"])
        return cls(**kwargs)


def effective_diagonal(config: ExperimentConfig):
    """(a_bar, a_bar_se, psi_bar, psi_bar_se) per the configured mode."""
    d = config.d
    if config.a_bar_mode == "exchangeable-exact":
        a_bar = np.full(d, 1.0 / d)
        a_se = np.zeros(d)
        if config.psi.kind == "constant-one":
            return a_bar, a_se, 1.0, 0.0
        if config.psi.kind == "first-coefficient":
            # psi = a_1, so the weighted mean is abar_1, again exact
            return a_bar, a_se, 1.0 / d, 0.0
        raise ExperimentError(
            "exchangeable-exact mode cannot evaluate a custom psi; "
            "use a_bar_mode='estimate'")
    seeds = range(config.base_seed + 900_000,
                  config.base_seed + 900_000 + config.stats_seeds)
    es = effective_stats(config.dist, config.psi, d, config.torus_L, seeds,
                         config.solver)
    psi_se = float(es.psi_bar.std(ddof=1) / np.sqrt(len(es.psi_bar))) \
        if len(es.psi_bar) > 1 else float("nan")
    return es.a_bar_mean, es.a_bar_se, float(es.psi_bar.mean()), psi_se


# -- power-law fitting ---------------------------------------------------------

def _ols_loglog(R: np.ndarray, v: np.ndarray, log_correction: bool):
    x = np.log(R)
    y = np.log(v / np.log(R)) if log_correction else np.log(v)
    n = len(x)
    xbar = x.mean()
    sxx = float(((x - xbar) ** 2).sum())
    slope = float(((x - xbar) * (y - y.mean())).sum() / sxx)
    intercept = float(y.mean() - slope * xbar)
    resid = y - (intercept + slope * x)
    if n > 2:
        se = float(np.sqrt((resid @ resid) / (n - 2) / sxx))
    else:
        se = 0.0
    return slope, intercept, se


def fit_powerlaw(points, log_correction: bool = False):
    """Least-squares slope of log value against log R.

    points is an iterable of (R, value) pairs, at least three distinct R,
    values strictly positive. With log_correction the fit is on
    log(value / log R), which turns an exact R^s log R law back into
    slope s. Returns (slope, intercept, (lo, hi)) with a 2-sigma
    interval from the regression residuals.
    """
    pts = [(float(r), float(v)) for r, v in points]
    if len({r for r, _ in pts}) < 3:
        raise ValueError("need at least three distinct R values")
    R = np.array([r for r, _ in pts])
    v = np.array([x for _, x in pts])
    if np.any(v <= 0.0):
        raise ValueError("power-law fit needs positive values")
    if np.any(R <= (1.0 if log_correction else 0.0)):
        raise ValueError("R values must exceed 1" if log_correction
                         else "R values must be positive")
    slope, intercept, se = _ols_loglog(R, v, log_correction)
    return slope, intercept, (slope - 2.0 * se, slope + 2.0 * se)


# -- rate experiments ----------------------------------------------------------

@dataclass
class RatePoint:
    R: int
    seed: int
    error_max: float
    error_l2: float
    iters: int
    residual: float
    converged: bool
    admitted: bool

    def to_json_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RateReport:
    label: str
    d: int
    points: list
    per_R_mean: dict          # R -> mean error_max over admitted points
    fitted_slope: float
    intercept: float
    slope_ci: tuple           # 95% across-seed bootstrap on the slope
    window_slopes: list       # (R_mid, slope) over sliding R-triples
    a_bar: list
    a_bar_se: list
    psi_bar: float
    psi_bar_se: float
    log_correction: bool
    config: dict

    def to_json_dict(self) -> dict:
        out = dict(self.__dict__)
        out["points"] = [p.to_json_dict() for p in self.points]
        out["per_R_mean"] = {str(k): v for k, v in self.per_R_mean.items()}
        out["slope_ci"] = list(self.slope_ci)
        out["window_slopes"] = [list(w) for w in self.window_slopes]
        return out


def _rate_cell(config: ExperimentConfig, f: Polynomial, R: int,
               seed: int) -> RatePoint:
    d = config.d
    env = sample_environment(config.dist, seed, d)
    ball = build_ball(float(R), d)
    xs = ball.interior_coords().astype(np.float64) / R
    psi_vals = psi_eval(env, ball.interior_coords(), config.psi)
    rhs = f(xs) * psi_vals / float(R) ** 2
    g = config.u_bar(ball.boundary_coords().astype(np.float64) / R)
    prob = assemble_dirichlet(env, ball, rhs, g)
    res = solve_iterative(prob, config.solver)
    err = res.values - config.u_bar(xs)
    error_max = float(np.max(np.abs(err)))
    error_l2 = float(np.sqrt(np.mean(err ** 2)))
    # comparison-function bound: |u| <= max|g| + (R+1)^2 max|rhs|
    abp = np.max(np.abs(g)) + (R + 1.0) ** 2 * np.max(np.abs(rhs)) + 1e-8
    admitted = bool(res.converged and np.max(np.abs(res.values)) <= abp)
    return RatePoint(int(R), int(seed), error_max, error_l2,
                     res.iterations, res.residual_inf, res.converged, admitted)


def _slope_of_means(groups: dict, log_correction: bool) -> tuple:
    pts = [(r, float(np.mean(errs))) for r, errs in sorted(groups.items())]
    return fit_powerlaw(pts, log_correction)


def run_rate_experiment(config: ExperimentConfig,
                        max_workers: int = 1) -> RateReport:
    """Manufactured-solution homogenization-rate sweep.

    Solves seeds_per_R independent samples at every R in R_list, admits
    points that converged and pass the comparison-function bound, and
    fits log mean error against log R. The slope interval is a
    percentile bootstrap resampling seeds within each R.
    """
    if config.u_bar is None or config.u_bar.is_zero:
        raise ExperimentError("rate experiment needs a nonzero u_bar")
    a_bar, a_se, psi_bar, psi_se = effective_diagonal(config)
    f = manufactured_source(config.u_bar, a_bar, psi_bar)
    cells = [(R, config.base_seed + 10_000 * ri + s)
             for ri, R in enumerate(config.R_list)
             for s in range(config.seeds_per_R)]
    if max_workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            points = list(pool.map(
                lambda c: _rate_cell(config, f, c[0], c[1]), cells))
    else:
        points = [_rate_cell(config, f, R, s) for R, s in cells]
    points.sort(key=lambda p: (p.R, p.seed))
    groups: dict = {}
    for p in points:
        if p.admitted:
            groups.setdefault(p.R, []).append(p.error_max)
    if len(groups) < 3:
        raise ExperimentError(
            f"only {len(groups)} R values have admitted solves; need 3")
    slope, intercept, _ = _slope_of_means(groups, config.log_correction)
    rng = np.random.default_rng(_BOOTSTRAP_SEED)
    boot = np.empty(_BOOTSTRAP_SAMPLES)
    arrs = {r: np.asarray(v) for r, v in groups.items()}
    for b in range(_BOOTSTRAP_SAMPLES):
        resampled = {r: a[rng.integers(0, len(a), size=len(a))]
                     for r, a in arrs.items()}
        boot[b], _, _ = _slope_of_means(resampled, config.log_correction)
    ci = (float(np.quantile(boot, 0.025)), float(np.quantile(boot, 0.975)))
    Rs = sorted(groups)
    window = []
    for i in range(len(Rs) - 2):
        tri = {r: groups[r] for r in Rs[i:i + 3]}
        ws, _, _ = _slope_of_means(tri, config.log_correction)
        window.append((float(Rs[i + 1]), float(ws)))
    per_R_mean = {r: float(np.mean(v)) for r, v in sorted(groups.items())}
    return RateReport(
        label=config.label, d=config.d, points=points, per_R_mean=per_R_mean,
        fitted_slope=float(slope), intercept=float(intercept), slope_ci=ci,
        window_slopes=window, a_bar=[float(x) for x in a_bar],
        a_bar_se=[float(x) for x in a_se], psi_bar=float(psi_bar),
        psi_bar_se=float(psi_se), log_correction=config.log_correction,
        config=config.to_json_dict())


# -- tensor verification -------------------------------------------------------

@dataclass
class TensorReport:
    label: str
    d: int
    n_seeds: int
    lam_mean: list
    lam_se: list
    eta_mean: list
    eta_se: list
    max_abs_z: float
    pairing_worst: float      # worst |plain + reflected| / (tol * scale)
    pairing_ok: bool
    a_bar_mean: list
    config: dict

    def to_json_dict(self) -> dict:
        return dict(self.__dict__)


def verify_tensors(config: ExperimentConfig) -> TensorReport:
    """Ensemble z-scores for the flux tensors plus the exact pairing check.

    The statistical leg averages lambda-bar and eta-bar over stats_seeds
    independent samples; under the reflection-symmetric laws every entry
    should sit within a few standard errors of zero. The pairing leg is
    an identity per sample: the estimator on a sample plus the estimator
    on its reflection cancels to solver tolerance.
    """
    seeds = range(config.base_seed, config.base_seed + config.stats_seeds)
    es = effective_stats(config.dist, config.psi, config.d, config.torus_L,
                         seeds, config.solver)
    lam_z = es.lam_mean / es.lam_se
    eta_z = es.eta_mean / es.eta_se
    max_z = float(max(np.max(np.abs(lam_z)), np.max(np.abs(eta_z))))
    tol = config.solver.tol
    worst = 0.0
    for s in range(config.pair_seeds):
        plain, refl = reflected_stats_pair(
            config.dist, config.d, config.torus_L, config.base_seed + s,
            config.psi, config.solver)
        scale = max(1.0, float(np.max(np.abs(plain.lam))),
                    float(np.max(np.abs(plain.eta))))
        cancel = max(float(np.max(np.abs(plain.lam + refl.lam))),
                     float(np.max(np.abs(plain.eta + refl.eta))))
        worst = max(worst, cancel / (tol * scale))
    return TensorReport(
        label=config.label, d=config.d, n_seeds=config.stats_seeds,
        lam_mean=es.lam_mean.tolist(), lam_se=es.lam_se.tolist(),
        eta_mean=es.eta_mean.tolist(), eta_se=es.eta_se.tolist(),
        max_abs_z=max_z, pairing_worst=float(worst),
        pairing_ok=bool(worst <= 2.0), a_bar_mean=es.a_bar_mean.tolist(),
        config=config.to_json_dict())


# -- two-scale expansion residual ----------------------------------------------

@dataclass
class ExpansionReport:
    label: str
    d: int
    period: int
    R_list: list
    residual_full: list
    residual_ablated: list
    slope_full: float
    slope_ablated: float
    degradation: float
    a_bar: list
    psi_bar: float
    lam_bar: list
    eta_bar: list
    config: dict

    def to_json_dict(self) -> dict:
        return dict(self.__dict__)


def _periodic_values(grid: np.ndarray, coords: np.ndarray,
                     period: int) -> np.ndarray:
    idx = tuple((coords % period).T)
    return grid[idx]


def expansion_residual(config: ExperimentConfig,
                       R_list=None) -> ExpansionReport:
    """Residual of the full corrected expansion on a periodic medium.

    On a period-L medium the torus correctors satisfy their equations on
    all of Z^d exactly, so the expansion

        w = u - ubar(./R) - z/R + [v^k d_kk ubar - f xi]/R^2
            - [d_kki ubar p^k_i - d_i f s_i]/(2 R^3)

    has |L w| of order R^{-4} inside the half ball once every term is in
    place; dropping the p, s terms leaves the R^{-3} sources uncancelled.
    The report carries max |L w| over the R/2 ball per R for both
    variants and their fitted decay slopes.
    """
    if config.u_bar is None or config.u_bar.is_zero:
        raise ExperimentError("expansion residual needs a nonzero u_bar")
    d = config.d
    period = config.torus_L
    R_list = list(config.R_list if R_list is None else R_list)
    torus = build_torus(period, d)
    env = sample_environment(config.dist, config.base_seed, d,
                             geometry=period)
    cs = compute_correctors(env, torus, config.psi, config.solver)
    ts = tensor_stats(cs)
    f = manufactured_source(config.u_bar, cs.a_bar, cs.psi_bar)
    grad_f = [f.derivative(i) for i in range(d)]
    second = config.u_bar.second_diag()
    u_bar = config.u_bar
    flux_v = {k: flux_grids(env, torus, cs.v[k]) for k in cs.v}
    flux_xi = flux_grids(env, torus, cs.xi)
    needed_p = [(k, i) for k in range(d) for i in range(d)
                if u_bar.third[(k, i)]]
    needed_s = [i for i in range(d) if not grad_f[i].is_zero]
    res_full = []
    res_abl = []
    for R in R_list:
        ball = build_ball(float(R), d)
        all_coords = ball.coords
        int_coords = ball.interior_coords()
        xs_all = all_coords.astype(np.float64) / R
        xs_int = int_coords.astype(np.float64) / R
        # u: the manufactured Dirichlet solve on this medium
        psi_vals = psi_eval(env, int_coords, config.psi)
        rhs_u = f(xs_int) * psi_vals / float(R) ** 2
        g = u_bar(ball.boundary_coords().astype(np.float64) / R)
        prob_u = assemble_dirichlet(env, ball, rhs_u, g)
        sol_u = solve_iterative(prob_u, config.solver)
        u_full = prob_u.full_solution(sol_u.values).values
        # z: re-centering solve driven by the measured tensors
        rhs_z = np.zeros(len(int_coords))
        for k in range(d):
            for i in range(d):
                tp = u_bar.third_poly(k, i)
                if tp.is_zero:
                    continue
                rhs_z += 0.5 * ts.lam[k, i] * tp(xs_int)
        for i in needed_s:
            rhs_z -= 0.5 * ts.eta[i] * grad_f[i](xs_int)
        rhs_z /= float(R) ** 2
        prob_z = assemble_dirichlet(env, ball, rhs_z,
                                    np.zeros(len(ball.boundary_pos)))
        sol_z = solve_iterative(prob_z, config.solver)
        z_full = prob_z.full_solution(sol_z.values).values
        # localized higher correctors, tiled sources
        box = build_box(green_box_half_width(float(R)), d)
        p_vals = {}
        for (k, i) in needed_p:
            src = _tile_box_interior(flux_v[k][i] - ts.lam[k, i], box, period)
            p_vals[(k, i)] = _local_corrector_at(env, float(R), src, box,
                                                 config.solver, all_coords)
        s_vals = {}
        for i in needed_s:
            src = _tile_box_interior(flux_xi[i] - ts.eta[i], box, period)
            s_vals[i] = _local_corrector_at(env, float(R), src, box,
                                            config.solver, all_coords)
        # assemble w on the whole ball (boundary values feed L w inside)
        v_at = {k: _periodic_values(cs.v[k].grid_view(), all_coords, period)
                for k in cs.v}
        xi_at = _periodic_values(cs.xi.grid_view(), all_coords, period)
        base = (u_full - u_bar(xs_all) - z_full / R)
        order2 = np.zeros(len(all_coords))
        for k in range(d):
            sd = second[k]
            if not sd.is_zero:
                order2 += v_at[k] * sd(xs_all)
        order2 -= f(xs_all) * xi_at
        order3 = np.zeros(len(all_coords))
        for (k, i) in needed_p:
            order3 += u_bar.third_poly(k, i)(xs_all) * p_vals[(k, i)]
        for i in needed_s:
            order3 -= grad_f[i](xs_all) * s_vals[i]
        w = base + order2 / R ** 2 - 0.5 * order3 / R ** 3
        w_abl = base + order2 / R ** 2
        r_int = np.linalg.norm(int_coords, axis=1)
        sel = r_int <= R / 2.0
        lw = apply_L(env, GridFunction(ball, w))
        lw_abl = apply_L(env, GridFunction(ball, w_abl))
        res_full.append(float(np.max(np.abs(lw[sel]))))
        res_abl.append(float(np.max(np.abs(lw_abl[sel]))))
    slope_full, _, _ = fit_powerlaw(zip(R_list, res_full))
    slope_abl, _, _ = fit_powerlaw(zip(R_list, res_abl))
    return ExpansionReport(
        label=config.label, d=d, period=period, R_list=[int(r) for r in R_list],
        residual_full=res_full, residual_ablated=res_abl,
        slope_full=float(slope_full), slope_ablated=float(slope_abl),
        degradation=float(slope_abl - slope_full),
        a_bar=[float(x) for x in cs.a_bar], psi_bar=float(cs.psi_bar),
        lam_bar=ts.lam.tolist(), eta_bar=ts.eta.tolist(),
        config=config.to_json_dict())


def _gather_box(full_values: np.ndarray, box, coords: np.ndarray) -> np.ndarray:
    idx = box.site_index(coords)
    if np.any(idx < 0):
        raise ValueError("coordinates leave the box")
    return full_values[idx]


def _tile_box_interior(grid: np.ndarray, box, period: int) -> np.ndarray:
    """Periodic extension of a torus field over a box interior.

    Per-axis index arithmetic; the box coordinate list is never built
    (at half-width 128 that list alone runs to hundreds of MB).
    """
    W = int(box.param)
    ax = np.arange(-W + 1, W) % period
    return grid[np.ix_(*([ax] * box.d))]


def _local_corrector_at(env, R: float, src: np.ndarray, box,
                        solver, coords: np.ndarray) -> np.ndarray:
    """Killed-operator solve gathered at coords; box-sized arrays stay local."""
    full, _ = higher_corrector_local(env, R, src, box, solver)
    return _gather_box(full.values, box, coords)


# -- report emission -----------------------------------------------------------

def _csv_rows(report: RateReport) -> list:
    rows = []
    for p in report.points:
        rows.append(",".join([
            report.label, str(report.d), str(p.R), str(p.seed),
            repr(float(p.error_max)), repr(float(p.error_l2)),
            str(p.iters), repr(float(p.residual)), str(p.converged).lower(),
        ]))
    return rows


def emit_report(report, out_dir: str, formats=("json", "csv")) -> list:
    """Write a report deterministically; returns the paths written.

    JSON is sorted-key with a trailing newline; CSV uses the documented
    schema and repr floats, so identical inputs give identical bytes.
    Reports without rate points skip the CSV format silently.
    """
    bad = set(formats) - {"json", "csv"}
    if bad:
        raise ValueError(f"unknown report formats {sorted(bad)}")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    label = report.label
    if "json" in formats:
        path = os.path.join(out_dir, f"{label}.json")
        body = json.dumps(report.to_json_dict(), sort_keys=True, indent=2)
        with open(path, "w", newline="\n") as fh:
            fh.write(body + "\n")
        paths.append(path)
    if "csv" in formats and isinstance(report, RateReport):
        path = os.path.join(out_dir, f"{label}.csv")
        with open(path, "w", newline="\n") as fh:
            fh.write(CSV_HEADER + "\n")
            for row in _csv_rows(report):
                fh.write(row + "\n")
        paths.append(path)
    return paths
