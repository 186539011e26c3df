"""Discrete lattice geometry: balls, boxes, and tori in Z^d.

A domain carries a fixed site enumeration, an interior/boundary
classification, and neighbor lookup for the (2d+1)-point stencils used by
the operators. Site ordering is lexicographic over coordinates, which fixes
all downstream determinism (vector layouts, reduction orders, file dumps).

Ball geometry: B_R is the open Euclidean ball, membership |x| < R strict.
A site is interior when the radial gap R - |x| is at least 1, so every
lattice neighbor of an interior site is still inside B_R. The boundary is
the outer lattice boundary of the interior set: sites at step distance 1
from some interior site that are not interior themselves. For any R >= 1
the closed ball of radius R-1 intersected with Z^d equals the interior.

Box geometry: all lattice points with max-norm at most W; the outer shell
(max-norm exactly W) is the boundary. Used as the truncation domain for
killed Green function solves.

Torus geometry: Z_L^d with wrapped neighbors; every site is interior.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GridDomain",
    "GridFunction",
    "Differences",
    "build_ball",
    "build_box",
    "build_torus",
    "unit_directions",
    "differences",
    "dump_grid",
    "load_grid",
]


def unit_directions(d: int) -> np.ndarray:
    """Stencil direction vectors as a (2d, d) array.

    Order is (+e1, -e1, +e2, -e2, ...): column 2i is +e_{i+1}, column 2i+1
    its negative. Every neighbor table and weight list in the package uses
    this order.
    """
    dirs = np.zeros((2 * d, d), dtype=np.int64)
    for i in range(d):
        dirs[2 * i, i] = 1
        dirs[2 * i + 1, i] = -1
    return dirs


class GridDomain:
    """A finite set of lattice sites with classification and indexing.

    Attributes
    ----------
    kind : {"ball", "box", "torus"}
    d : spatial dimension (>= 2)
    param : R (ball), half-width W (box), or side L (torus)
    shape : full-grid shape for box/torus layouts, None for balls

    Sites are indexed 0..n_sites-1 in lexicographic coordinate order.
    For box and torus domains this coincides with C-order raveling of the
    underlying grid, so `GridFunction.values.reshape(domain.shape)` is the
    natural field view. Instances are immutable after construction.
    """

    def __init__(self, kind: str, d: int, param: float):
        self.kind = kind
        self.d = d
        self.param = param
        self.shape: tuple[int, ...] | None = None
        self._coords: np.ndarray | None = None
        self._interior_pos: np.ndarray | None = None
        self._boundary_pos: np.ndarray | None = None
        self._neighbors: np.ndarray | None = None
        # ball only: dense index lookup over the bounding box, -1 = absent
        self._lookup: np.ndarray | None = None
        self._lookup_origin: int = 0

    # -- constructors are the module-level build_* functions --

    @property
    def n_sites(self) -> int:
        if self.kind == "ball":
            return len(self._coords)
        return int(np.prod(self.shape))

    @property
    def n_interior(self) -> int:
        if self.kind == "torus":
            return self.n_sites
        if self.kind == "box":
            m = self.shape[0]
            return (m - 2) ** self.d
        return len(self._interior_pos)

    @property
    def n_boundary(self) -> int:
        return self.n_sites - self.n_interior

    @property
    def coords(self) -> np.ndarray:
        """(n_sites, d) int64 coordinates in index order. Lazy for big grids."""
        if self._coords is None:
            axes = self._axis_coords()
            mesh = np.meshgrid(*axes, indexing="ij")
            self._coords = np.stack([m.ravel() for m in mesh], axis=1)
        return self._coords

    def _axis_coords(self) -> list[np.ndarray]:
        """Per-axis coordinate values for grid-shaped (box/torus) domains."""
        if self.kind == "torus":
            L = int(self.param)
            return [np.arange(L, dtype=np.int64)] * self.d
        if self.kind == "box":
            W = int(self.param)
            return [np.arange(-W, W + 1, dtype=np.int64)] * self.d
        raise ValueError("ball domains have no grid axes")

    @property
    def interior_pos(self) -> np.ndarray:
        """Indices of interior sites, ascending (lazy for big boxes)."""
        if self._interior_pos is None:
            if self.kind == "torus":
                self._interior_pos = np.arange(self.n_sites)
            elif self.kind == "box":
                m = self.shape[0]
                mask = np.zeros(self.shape, dtype=bool)
                mask[(slice(1, m - 1),) * self.d] = True
                self._interior_pos = np.flatnonzero(mask.ravel())
        return self._interior_pos

    @property
    def boundary_pos(self) -> np.ndarray:
        if self._boundary_pos is None:
            mask = np.ones(self.n_sites, dtype=bool)
            mask[self.interior_pos] = False
            self._boundary_pos = np.flatnonzero(mask)
        return self._boundary_pos

    def interior_coords(self) -> np.ndarray:
        return self.coords[self.interior_pos]

    def boundary_coords(self) -> np.ndarray:
        return self.coords[self.boundary_pos]

    def is_interior(self) -> np.ndarray:
        """(n_sites,) boolean classification mask."""
        mask = np.zeros(self.n_sites, dtype=bool)
        mask[self.interior_pos] = True
        return mask

    def site_index(self, coords: np.ndarray) -> np.ndarray:
        """Map (m, d) coordinates to site indices; -1 where absent.

        Torus coordinates are reduced modulo L first.
        """
        coords = np.asarray(coords, dtype=np.int64)
        single = coords.ndim == 1
        if single:
            coords = coords[None, :]
        if self.kind == "torus":
            L = int(self.param)
            idx = np.ravel_multi_index(tuple((coords % L).T), self.shape)
        elif self.kind == "box":
            W = int(self.param)
            inside = np.all(np.abs(coords) <= W, axis=1)
            shifted = np.clip(coords + W, 0, 2 * W)
            idx = np.ravel_multi_index(tuple(shifted.T), self.shape)
            idx = np.where(inside, idx, -1)
        else:
            off = self._lookup_origin
            side = self._lookup.shape[0]
            shifted = coords + off
            inside = np.all((shifted >= 0) & (shifted < side), axis=1)
            shifted = np.clip(shifted, 0, side - 1)
            idx = self._lookup[tuple(shifted.T)]
            idx = np.where(inside, idx, -1)
        return idx[0] if single else idx

    def neighbor_indices(self) -> np.ndarray:
        """(n_interior, 2d) site indices of interior-site neighbors.

        Direction order matches unit_directions. Every neighbor of an
        interior site exists in the domain by construction. Materialized
        lazily; box/torus solver paths never call this on large grids.
        """
        if self._neighbors is None:
            dirs = unit_directions(self.d)
            ic = self.interior_coords()
            nbr = ic[:, None, :] + dirs[None, :, :]
            flat = self.site_index(nbr.reshape(-1, self.d))
            if np.any(flat < 0):
                raise AssertionError("interior site with neighbor outside domain")
            self._neighbors = flat.reshape(len(ic), 2 * self.d).astype(np.int64)
        return self._neighbors

    def centered_coords(self) -> np.ndarray:
        """Coordinates with the origin as reference point.

        For a torus the canonical range [0, L) is remapped to
        [-L//2, L - L//2); other kinds are already origin-centered.
        """
        if self.kind == "torus":
            L = int(self.param)
            half = L // 2
            return ((self.coords + half) % L) - half
        return self.coords

    def param_label(self) -> float:
        return self.param

    def __repr__(self) -> str:  # pragma: no cover
        return (f"GridDomain(kind={self.kind!r}, d={self.d}, param={self.param}, "
                f"sites={self.n_sites}, interior={self.n_interior})")


def build_ball(R: float, d: int) -> GridDomain:
    """Ball domain: interior = {|x| <= R-1}, boundary = its outer lattice shell.

    R may be non-integer. Raises ValueError for R < 1 or d < 2.
    """
    if R < 1:
        raise ValueError(f"ball radius must be >= 1, got {R}")
    if d < 2:
        raise ValueError(f"dimension must be >= 2, got {d}")
    W = int(np.ceil(R))  # boundary sites satisfy |x| <= R <= W componentwise
    side = 2 * W + 1
    ax = np.arange(-W, W + 1, dtype=np.int64)
    r2 = np.zeros((side,) * d)
    for i in range(d):
        shape = [1] * d
        shape[i] = side
        r2 = r2 + (ax.astype(float) ** 2).reshape(shape)
    interior = r2 <= (R - 1.0) ** 2
    # boundary = one-step dilation of the interior, minus the interior
    dilated = interior.copy()
    for i in range(d):
        lo = [slice(None)] * d
        hi = [slice(None)] * d
        lo[i] = slice(0, side - 1)
        hi[i] = slice(1, side)
        dilated[tuple(lo)] |= interior[tuple(hi)]
        dilated[tuple(hi)] |= interior[tuple(lo)]
    member = dilated
    idx_grid = np.full((side,) * d, -1, dtype=np.int64)
    idx_grid[member] = np.arange(int(member.sum()))
    # np.argwhere scans in C-order, which is lexicographic over coordinates
    coords = np.argwhere(member).astype(np.int64) - W

    dom = GridDomain("ball", d, float(R))
    dom._coords = coords
    dom._lookup = idx_grid
    dom._lookup_origin = W
    dom._interior_pos = np.flatnonzero(interior[member])
    return dom


def build_box(W: int, d: int) -> GridDomain:
    """Box domain [-W, W]^d; the max-norm-W shell is the boundary."""
    if W < 1:
        raise ValueError(f"box half-width must be >= 1, got {W}")
    if d < 2:
        raise ValueError(f"dimension must be >= 2, got {d}")
    dom = GridDomain("box", d, int(W))
    dom.shape = (2 * W + 1,) * d
    return dom


def build_torus(L: int, d: int) -> GridDomain:
    """Torus domain Z_L^d. L >= 3 so a site's 2d neighbors are distinct."""
    if L < 3:
        raise ValueError(f"torus side must be >= 3, got {L}")
    if d < 2:
        raise ValueError(f"dimension must be >= 2, got {d}")
    dom = GridDomain("torus", d, int(L))
    dom.shape = (L,) * d
    return dom


@dataclass
class GridFunction:
    """Real values on a domain, dense in site-index order."""

    domain: GridDomain
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.domain.n_sites,):
            raise ValueError(
                f"values length {self.values.shape} does not match "
                f"{self.domain.n_sites} sites")

    @classmethod
    def zeros(cls, domain: GridDomain) -> "GridFunction":
        return cls(domain, np.zeros(domain.n_sites))

    @classmethod
    def from_callable(cls, domain: GridDomain, fn) -> "GridFunction":
        return cls(domain, np.asarray(fn(domain.coords), dtype=np.float64))

    def grid_view(self) -> np.ndarray:
        """Field reshaped to the full grid (box/torus only)."""
        if self.domain.shape is None:
            raise ValueError("ball domains have no grid view")
        return self.values.reshape(self.domain.shape)


@dataclass
class Differences:
    """First and second differences of a field at one site."""

    forward: np.ndarray   # u(x+e_i) - u(x), i = 1..d
    backward: np.ndarray  # u(x-e_i) - u(x)
    second: np.ndarray    # u(x+e_i) + u(x-e_i) - 2u(x)


def differences(u: GridFunction, x) -> Differences:
    """Difference quotients of u at site x.

    Requires x and all 2d neighbors to be in the domain (always true on a
    torus; x must be interior otherwise). Raises KeyError when a neighbor
    is missing.
    """
    dom = u.domain
    x = np.asarray(x, dtype=np.int64)
    dirs = unit_directions(dom.d)
    here = dom.site_index(x)
    nbr = dom.site_index(x[None, :] + dirs)
    if here < 0 or np.any(nbr < 0):
        raise KeyError(f"site {tuple(x)} or a neighbor is outside the domain")
    u0 = u.values[here]
    un = u.values[nbr]
    forward = un[0::2] - u0
    backward = un[1::2] - u0
    return Differences(forward, backward, forward + backward)


def dump_grid(u: GridFunction, path: str) -> None:
    """Write a field as raw little-endian float64 plus a JSON sidecar.

    The .grid file holds the values in site-index order; the sidecar
    (path + ".json") records the domain so the dump is self-describing.
    """
    dom = u.domain
    header = {
        "d": dom.d,
        "kind": dom.kind,
        "R_or_L": dom.param,
        "site_count": dom.n_sites,
        "ordering": "lex",
    }
    u.values.astype("<f8").tofile(path)
    with open(str(path) + ".json", "w") as fh:
        json.dump(header, fh, sort_keys=True)
        fh.write("\n")


def load_grid(path: str) -> tuple[np.ndarray, dict]:
    """Read back a .grid dump; returns (values, header)."""
    with open(str(path) + ".json") as fh:
        header = json.load(fh)
    values = np.fromfile(path, dtype="<f8")
    if len(values) != header["site_count"]:
        raise ValueError("grid file length does not match sidecar site_count")
    return values, header
