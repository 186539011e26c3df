"""The balanced difference operator and assembly of its linear systems.

L u(x) = (1/2) sum_i a_i(x) [u(x+e_i) + u(x-e_i) - 2 u(x)]
       = sum_y omega(x, y) [u(y) - u(x)],   omega(x, x +- e_i) = a_i(x)/2.

Every system solved in the package is a (2d+1)-point stencil over the
interior sites of a domain, written in the uniform row form

    A u(x) = -(1 + mass(x)) u(x) + sum_j w_j(x) u(x + dir_j)

with mass(x) >= 0 and positive neighbor weights, so that -A is an
irreducibly diagonally dominant M-matrix whenever mass is somewhere
positive or a Dirichlet boundary is present. Assemblies:

  dirichlet:  A = L,           solves L u = f with u = g on the boundary
  resolvent:  A = L - m I,     solves (m - L) u = rhs on a torus (m > 0)
  green:      A = L - eta/R^2, kill only outside the 2R ball, delta source
  adjoint:    A = K^T - I,     balance equations of the invariant density

Matrix-free application is specialized per domain kind: np.roll on tori,
shifted array slices on boxes, gather tables on balls. Weights are held
as a list of 2d interior-shaped arrays in unit_directions order; for the
symmetric-pair stencils (coefficient a_i(x)/2 on both x+e_i and x-e_i)
the two entries of a pair share one array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .environment import EnvironmentField
from .lattice import GridDomain, GridFunction, build_box

__all__ = [
    "LinearProblem",
    "apply_L",
    "assemble_dirichlet",
    "assemble_torus_operator",
    "assemble_resolvent",
    "assemble_killed",
    "assemble_green_local",
    "assemble_adjoint",
    "cutoff_eta0",
    "cutoff_eta",
    "green_box_half_width",
]


# -- cutoff -------------------------------------------------------------------

def cutoff_eta0(r: np.ndarray) -> np.ndarray:
    """Radial cutoff: 0 on [0, 7/3], 1 on [8/3, inf), quintic ramp between.

    The ramp is the C^2 smoothstep 6t^5 - 15t^4 + 10t^3, monotone with
    bounded first and second derivatives on the unit interval.
    """
    r = np.asarray(r, dtype=float)
    t = np.clip((r - 7.0 / 3.0) * 3.0, 0.0, 1.0)
    # clamp: Horner evaluation can overshoot 1 by an ulp near the seam
    return np.clip(t * t * t * (10.0 + t * (-15.0 + 6.0 * t)), 0.0, 1.0)


def cutoff_eta(r: np.ndarray, R: float) -> np.ndarray:
    """Rescaled cutoff: 0 inside |x| <= 2R, 1 outside |x| >= 3R."""
    return cutoff_eta0(np.asarray(r, dtype=float) / R)


def green_box_half_width(R: float) -> int:
    """Truncation half-width for killed Green solves (covers the 4R ball)."""
    return int(np.ceil(4 * R))


# -- the stencil system -------------------------------------------------------

def _interior_shape(domain: GridDomain) -> tuple[int, ...]:
    if domain.kind == "torus":
        return domain.shape
    if domain.kind == "box":
        m = domain.shape[0]
        return (m - 2,) * domain.d
    return (domain.n_interior,)


@dataclass
class LinearProblem:
    """One assembled stencil system.

    weights[j] multiplies u at the neighbor in direction unit_directions[j];
    each array has the domain's interior shape (grid-shaped for box/torus,
    flat for balls). rhs is interior-shaped; boundary holds the fixed values
    on boundary sites in site-index order (empty on tori). delta records an
    optional point source already folded into rhs, for bookkeeping.
    """

    domain: GridDomain
    weights: list
    mass: np.ndarray
    rhs: np.ndarray
    boundary: np.ndarray
    delta: tuple | None = None
    adjoint: bool = False  # True when rows encode K^T - I
    deflate: bool = False  # subtract mean(u): removes the constant kernel

    @property
    def n_unknowns(self) -> int:
        return int(np.prod(_interior_shape(self.domain)))

    def apply(self, u: np.ndarray, boundary: np.ndarray | None = None) -> np.ndarray:
        """A u with the given boundary values (zero when omitted).

        u is flat of length n_unknowns; the result is flat. With
        boundary=None this is the linear interior operator used by the
        iterative solvers.
        """
        dom = self.domain
        ishape = _interior_shape(dom)
        ug = u.reshape(ishape)
        if dom.kind == "torus":
            out = -(1.0 + self.mass) * ug
            for i in range(dom.d):
                out = out + self.weights[2 * i] * np.roll(ug, -1, axis=i)
                out = out + self.weights[2 * i + 1] * np.roll(ug, 1, axis=i)
            if self.deflate:
                # rank-one shift: the constant kernel direction maps to -1
                # instead of 0, so Krylov iterates cannot drift along it.
                # Any left-density-compatible rhs keeps its exact solution,
                # delivered in mean-zero form.
                out = out - ug.mean()
            return out.ravel()
        if dom.kind == "box":
            m = dom.shape[0]
            pad = np.zeros(dom.shape)
            core = (slice(1, m - 1),) * dom.d
            pad[core] = ug
            if boundary is not None and len(boundary):
                flat = pad.ravel()
                flat[dom.boundary_pos] = boundary
                pad = flat.reshape(dom.shape)
            out = -(1.0 + self.mass) * ug
            for i in range(dom.d):
                up = list(core)
                dn = list(core)
                up[i] = slice(2, m)
                dn[i] = slice(0, m - 2)
                out = out + self.weights[2 * i] * pad[tuple(up)]
                out = out + self.weights[2 * i + 1] * pad[tuple(dn)]
            return out.ravel()
        # ball: gather through the combined site vector
        full = np.zeros(dom.n_sites)
        full[dom.interior_pos] = u
        if boundary is not None and len(boundary):
            full[dom.boundary_pos] = boundary
        nbr = dom.neighbor_indices()
        out = -(1.0 + self.mass) * u
        for j in range(2 * dom.d):
            out = out + self.weights[j] * full[nbr[:, j]]
        return out

    def effective_rhs(self) -> np.ndarray:
        """rhs minus the boundary-value contribution, flat."""
        b = self.rhs.ravel().copy()
        if self.domain.kind != "torus" and np.any(self.boundary):
            zero = np.zeros(self.n_unknowns)
            b -= self.apply(zero, boundary=self.boundary)
        return b

    def row_scale(self) -> float:
        """Normalizer for residual tolerances."""
        s = float(np.max(np.abs(self.rhs)))
        if len(self.boundary):
            s += float(np.max(np.abs(self.boundary)))
        return s + np.finfo(float).tiny

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense interior matrix and effective rhs (small systems only)."""
        n = self.n_unknowns
        if n > 4096:
            raise ValueError(f"dense assembly refused for {n} > 4096 unknowns")
        dom = self.domain
        nbr = dom.neighbor_indices()
        # map site index -> interior unknown index (-1 for boundary sites)
        to_unknown = np.full(dom.n_sites, -1, dtype=np.int64)
        to_unknown[dom.interior_pos] = np.arange(n)
        A = np.full((n, n), -1.0 / n) if self.deflate else np.zeros((n, n))
        A[np.arange(n), np.arange(n)] += -(1.0 + self.mass.ravel())
        b = self.rhs.ravel().copy()
        bvals = np.zeros(dom.n_sites)
        if len(self.boundary):
            bvals[dom.boundary_pos] = self.boundary
        for j in range(2 * dom.d):
            w = np.broadcast_to(self.weights[j].ravel(), (n,))
            cols = to_unknown[nbr[:, j]]
            inside = cols >= 0
            rows = np.arange(n)[inside]
            A[rows, cols[inside]] += w[inside]
            outside = ~inside
            if np.any(outside):
                b[outside] -= w[outside] * bvals[nbr[outside, j]]
        return A, b

    def dump_coo(self, path: str) -> None:
        """Text dump of the interior matrix, one "row col value" per line."""
        A, _ = self.dense()
        with open(path, "w") as fh:
            rows, cols = np.nonzero(A)
            for r, c in zip(rows, cols):
                fh.write(f"{r} {c} {float(A[r, c])!r}\n")

    def full_solution(self, u: np.ndarray) -> GridFunction:
        """Embed an interior solution into a field with the boundary values."""
        vals = np.zeros(self.domain.n_sites)
        vals[self.domain.interior_pos] = u
        if len(self.boundary):
            vals[self.domain.boundary_pos] = self.boundary
        return GridFunction(self.domain, vals)


# -- coefficient layout per domain kind ---------------------------------------

def _interior_a(env: EnvironmentField, domain: GridDomain) -> list[np.ndarray]:
    """a_i at interior sites, as d interior-shaped arrays."""
    d = domain.d
    if domain.kind == "torus":
        return env.a_axis_grids(domain.shape)
    if domain.kind == "box":
        m = domain.shape[0]
        core = (slice(1, m - 1),) * d
        if env.geometry is not None:
            # periodized field: gather from the torus table, exploiting that
            # the field is L-periodic in the coordinates of any view
            L = int(env.geometry)
            grids = env.a_axis_grids((L,) * d)
            W = int(domain.param)
            ax = np.arange(-W + 1, W, dtype=np.int64)
            idx = _periodic_gather_index(ax, L, d)
            return [g.ravel()[idx] for g in grids]
        a = env.a(domain.interior_coords())
        shape = (m - 2,) * d
        return [a[:, i].reshape(shape) for i in range(d)]
    a = env.a(domain.interior_coords())
    return [a[:, i] for i in range(d)]


def _periodic_gather_index(ax: np.ndarray, L: int, d: int) -> np.ndarray:
    """C-order ravel indices of (x mod L) over the grid ax x ... x ax."""
    idx = np.zeros((1,) * d, dtype=np.int64)
    for i in range(d):
        c = np.asarray(ax, dtype=np.int64) % L
        shape = [1] * d
        shape[i] = len(ax)
        idx = idx + c.reshape(shape) * (L ** (d - 1 - i))
    return idx


# -- operator application ------------------------------------------------------

def apply_L(env: EnvironmentField, u: GridFunction) -> np.ndarray:
    """L u at every interior site of u's domain, flat interior-shaped."""
    dom = u.domain
    a = _interior_a(env, dom)
    ishape = _interior_shape(dom)
    if dom.kind == "torus":
        ug = u.grid_view()
        out = np.zeros(ishape)
        for i in range(dom.d):
            out += 0.5 * a[i] * (np.roll(ug, -1, axis=i)
                                 + np.roll(ug, 1, axis=i) - 2.0 * ug)
        return out.ravel()
    if dom.kind == "box":
        m = dom.shape[0]
        core = (slice(1, m - 1),) * dom.d
        ug = u.grid_view()
        out = np.zeros(ishape)
        for i in range(dom.d):
            up = list(core)
            dn = list(core)
            up[i] = slice(2, m)
            dn[i] = slice(0, m - 2)
            out += 0.5 * a[i] * (ug[tuple(up)] + ug[tuple(dn)] - 2.0 * ug[core])
        return out.ravel()
    nbr = dom.neighbor_indices()
    ui = u.values[dom.interior_pos]
    out = np.zeros(dom.n_interior)
    for i in range(dom.d):
        out += 0.5 * a[i] * (u.values[nbr[:, 2 * i]]
                             + u.values[nbr[:, 2 * i + 1]] - 2.0 * ui)
    return out


# -- assemblies ----------------------------------------------------------------

def _half_weights(a: list[np.ndarray]) -> list[np.ndarray]:
    """Stencil weights a_i/2, shared between the +e_i and -e_i slots."""
    out = []
    for ai in a:
        half = 0.5 * ai
        out.append(half)
        out.append(half)
    return out


def assemble_dirichlet(env: EnvironmentField, domain: GridDomain,
                       f_scaled: np.ndarray, g: np.ndarray) -> LinearProblem:
    """L u = f_scaled on the interior, u = g on the boundary.

    f_scaled is interior-shaped (already carrying any 1/R^2 scaling and
    source functional), g is indexed like domain.boundary_pos.
    """
    if domain.kind == "torus":
        raise ValueError("Dirichlet problems need a domain with boundary")
    if env.d != domain.d:
        raise ValueError(f"environment dimension {env.d} != domain dimension {domain.d}")
    a = _interior_a(env, domain)
    ishape = _interior_shape(domain)
    f_scaled = np.asarray(f_scaled, dtype=float).reshape(ishape)
    g = np.asarray(g, dtype=float).reshape(domain.n_boundary)
    return LinearProblem(domain, _half_weights(a), np.zeros(ishape),
                         f_scaled, g)


def assemble_torus_operator(env: EnvironmentField, torus: GridDomain,
                            rhs: np.ndarray) -> LinearProblem:
    """L u = rhs on the torus, the corrector equation form.

    The raw system is singular: constants span the kernel, and a solution
    exists exactly when the invariant-density-weighted mean of rhs
    vanishes. The assembled operator is deflated (see LinearProblem.apply),
    which pins the free constant at zero mean and keeps large Krylov
    solves from drifting along the kernel.
    """
    if torus.kind != "torus":
        raise ValueError("the corrector-form operator lives on a torus")
    a = _interior_a(env, torus)
    rhs = np.asarray(rhs, dtype=float).reshape(torus.shape)
    return LinearProblem(torus, _half_weights(a), np.zeros(torus.shape),
                         rhs, np.zeros(0), deflate=True)


def assemble_resolvent(env: EnvironmentField, torus: GridDomain, mass: float,
                       rhs: np.ndarray, adjoint: bool = False) -> LinearProblem:
    """System whose solution solves (mass - L) u = rhs on the torus.

    mass must be positive (the operator alone is singular on a torus).
    With adjoint=True the transposed stencil is assembled instead, so the
    solution solves (mass - L^T) u = rhs; column sums of L replace row sums.
    """
    if torus.kind != "torus":
        raise ValueError("resolvent systems are assembled on tori")
    if mass <= 0:
        raise ValueError(f"resolvent mass must be positive, got {mass}")
    a = _interior_a(env, torus)
    if adjoint:
        weights = []
        for i in range(torus.d):
            weights.append(np.roll(0.5 * a[i], -1, axis=i))
            weights.append(np.roll(0.5 * a[i], 1, axis=i))
    else:
        weights = _half_weights(a)
    ishape = torus.shape
    rhs = np.asarray(rhs, dtype=float).reshape(ishape)
    # A = L - mass*I; A u = -rhs is the stored system
    return LinearProblem(torus, weights, np.full(ishape, float(mass)),
                         -rhs, np.zeros(0), adjoint=adjoint)


def _killed_parts(env: EnvironmentField, R: float, box: GridDomain | None):
    """Shared setup of (L - eta_R/R^2)-type solves: box, weights, kill rate."""
    if box is None:
        box = build_box(green_box_half_width(R), env.d)
    if box.kind != "box":
        raise ValueError("killed solves use a box domain")
    W = int(box.param)
    if W < 4 * R:
        raise ValueError(f"box half-width {W} does not cover 4R = {4 * R}")
    d = env.d
    a = _interior_a(env, box)
    m = box.shape[0]
    ax = np.arange(-W + 1, W, dtype=np.int64).astype(float)
    r2 = np.zeros((m - 2,) * d)
    for i in range(d):
        shape = [1] * d
        shape[i] = m - 2
        r2 = r2 + (ax ** 2).reshape(shape)
    mass = cutoff_eta(np.sqrt(r2), R) / R ** 2
    return box, _half_weights(a), mass


def assemble_killed(env: EnvironmentField, R: float, rhs: np.ndarray,
                    box: GridDomain | None = None) -> LinearProblem:
    """(L - eta_R/R^2) u = rhs with zero outer boundary, rhs a full field.

    The kill rate vanishes inside the 2R ball, so there the solution obeys
    L u = rhs exactly; the far-field damping plus the zero boundary on a
    box covering the 4R ball localize the problem. Used for the localized
    higher-order corrector solves.
    """
    box, weights, mass = _killed_parts(env, R, box)
    rhs = np.asarray(rhs, dtype=float).reshape(mass.shape)
    return LinearProblem(box, weights, mass, rhs, np.zeros(box.n_boundary))


def assemble_green_local(env: EnvironmentField, R: float, z,
                         box: GridDomain | None = None) -> LinearProblem:
    """Killed Green column: (L - eta_R/R^2) G(., z) = -1_z, zero outer boundary.

    A point-source instance of assemble_killed; the solution is nonnegative
    by inverse positivity and equals the local approximate Green function.
    """
    box, weights, mass = _killed_parts(env, R, box)
    W = int(box.param)
    rhs = np.zeros(mass.shape)
    z = np.asarray(z, dtype=np.int64)
    if np.any(np.abs(z) >= W):
        raise ValueError("point source must be interior to the box")
    rhs[tuple(z + (W - 1))] = -1.0
    return LinearProblem(box, weights, mass, rhs,
                         np.zeros(box.n_boundary), delta=(tuple(z), -1.0))


def assemble_adjoint(env: EnvironmentField, torus: GridDomain) -> LinearProblem:
    """Balance equations (K^T - I) m = 0 of the invariant density.

    Row x reads: sum_i [m(x+e_i) a_i(x+e_i)/2 + m(x-e_i) a_i(x-e_i)/2] - m(x).
    The system is singular with a one-dimensional kernel on a connected
    torus; solvers normalize with the constraint sum(m) = 1.
    """
    if torus.kind != "torus":
        raise ValueError("the balance system lives on a torus")
    a = _interior_a(env, torus)
    weights = []
    for i in range(torus.d):
        weights.append(np.roll(0.5 * a[i], -1, axis=i))
        weights.append(np.roll(0.5 * a[i], 1, axis=i))
    ishape = torus.shape
    return LinearProblem(torus, weights, np.zeros(ishape),
                         np.zeros(ishape), np.zeros(0), adjoint=True)
