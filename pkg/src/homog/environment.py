"""Reproducible i.i.d. diagonal coefficient fields on Z^d.

The field value at a site is a pure function of (seed, distribution spec,
canonical coordinate): sampling is counter-based (a keyed integer hash per
site and coefficient slot, splitmix64-style finalizer), not a sequential
stream. Re-evaluation is bit-identical in any traversal order, values are
independent across sites, and a field restricted to any window agrees with
the field on any larger window.

Geometry: an infinite window (canonical coordinate is the coordinate
itself) or a torus of side L (coordinate reduced mod L, which periodizes
the field). Orientation transforms (reflection through the origin, shifts)
are views that remap the queried coordinate before hashing, so
reflect(env) at x is bitwise equal to env at -x.

Normalization: a_i(x) = omega_i(x) / tr omega(x), so the transition kernel
omega(x, x +- e_i) = a_i(x)/2 sums to one and the ellipticity floor
a_i >= 2*kappa holds by construction of the built-in laws.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "DistributionSpec",
    "PsiSpec",
    "EnvironmentField",
    "EllipticityError",
    "sample_environment",
    "psi_eval",
]


class EllipticityError(ValueError):
    """Raised when distribution parameters violate the ellipticity floor."""


# -- counter-based generator -------------------------------------------------

_GOLD = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TAG_ENV = np.uint64(0x7E4D5A6B3C291F08)


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer on uint64 arrays (wrapping arithmetic)."""
    z = z + _GOLD
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _hash_coords(seed: int, tag: np.uint64, coords: np.ndarray) -> np.ndarray:
    """Per-site uint64 key from seed and integer coordinates, shape (n,)."""
    s = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        h = np.full(len(coords), s ^ tag, dtype=np.uint64)
        h = _mix64(h)
        for i in range(coords.shape[1]):
            h = _mix64(h ^ coords[:, i].astype(np.int64).view(np.uint64))
    return h


def _uniforms(key: np.ndarray, slot: int) -> np.ndarray:
    """Uniform [0,1) draw for one slot from per-site keys."""
    with np.errstate(over="ignore"):
        h = _mix64(key ^ np.uint64(slot + 1))
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


# -- specs --------------------------------------------------------------------

@dataclass
class DistributionSpec:
    """Single-site law of the diagonal coefficients.

    name: "uniform-diagonal" (each omega_i uniform on [low, 1]),
          "two-point" (each omega_i in {low, 1} with probability 1/2),
          "constant" (fixed diagonal, params["diag"]).
    kappa: ellipticity constant, 0 < kappa <= 1/(2d).
    params: per-name parameters; "low" defaults to the smallest value
            compatible with the ellipticity floor, 2*kappa*(d-1)/(1-2*kappa).
    """

    name: str = "uniform-diagonal"
    kappa: float | None = None  # None = 1/(4d), resolved against d
    params: dict = field(default_factory=dict)

    def resolve_kappa(self, d: int) -> float:
        kappa = self.kappa if self.kappa is not None else 1.0 / (4 * d)
        if not 0 < kappa <= 1.0 / (2 * d):
            raise EllipticityError(
                f"kappa must lie in (0, 1/(2d)] = (0, {1.0/(2*d)}], got {kappa}")
        return kappa

    def default_low(self, d: int) -> float:
        kappa = self.resolve_kappa(d)
        return 2 * kappa * (d - 1) / (1 - 2 * kappa)

    def validate(self, d: int) -> None:
        kappa = self.resolve_kappa(d)
        if self.name in ("uniform-diagonal", "two-point"):
            low = self.params.get("low", self.default_low(d))
            if not 0 < low <= 1:
                raise EllipticityError(f"low must be in (0, 1], got {low}")
            # worst single-site ratio: one coefficient at low, the rest at 1
            if low / (low + (d - 1)) < 2 * kappa - 1e-15:
                raise EllipticityError(
                    f"low={low} gives min a_i = {low/(low+d-1):.6g} < 2*kappa = {2*kappa}")
        elif self.name == "constant":
            diag = np.asarray(self.params.get("diag", np.ones(d)), dtype=float)
            if diag.shape != (d,) or np.any(diag <= 0):
                raise EllipticityError(f"constant law needs {d} positive entries")
            if np.min(diag / diag.sum()) < 2 * kappa - 1e-15:
                raise EllipticityError("constant diagonal violates the ellipticity floor")
        else:
            raise ValueError(f"unknown distribution {self.name!r}")

    def to_json_dict(self) -> dict:
        out = {"dist": self.name, "params": dict(self.params)}
        if self.kappa is not None:
            out["kappa"] = self.kappa
        return out

    @classmethod
    def from_json_dict(cls, data: dict) -> "DistributionSpec":
        unknown = set(data) - {"dist", "kappa", "params"}
        if unknown:
            raise ValueError(f"unknown distribution fields: {sorted(unknown)}")
        return cls(name=data.get("dist", "uniform-diagonal"),
                   kappa=data.get("kappa"),
                   params=dict(data.get("params", {})))


@dataclass
class PsiSpec:
    """Bounded source functional of the single-site coefficient.

    kind: "constant-one", "first-coefficient" (a_1(x)), or "custom-bounded"
    (a callable of the omega rows, API only, validated against bound).
    """

    kind: str = "constant-one"
    bound: float = 1.0
    fn: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.kind not in ("constant-one", "first-coefficient", "custom-bounded"):
            raise ValueError(f"unknown psi kind {self.kind!r}")
        if self.bound <= 0:
            raise ValueError("psi bound must be positive")
        if self.kind == "custom-bounded" and self.fn is None:
            raise ValueError("custom-bounded psi needs a callable")

    def to_json_dict(self) -> dict:
        if self.kind == "custom-bounded":
            raise ValueError("custom-bounded psi is not serializable")
        return {"kind": self.kind, "bound": self.bound}

    @classmethod
    def from_json_dict(cls, data: dict) -> "PsiSpec":
        unknown = set(data) - {"kind", "bound"}
        if unknown:
            raise ValueError(f"unknown psi fields: {sorted(unknown)}")
        return cls(kind=data.get("kind", "constant-one"),
                   bound=data.get("bound", 1.0))


# -- the field ----------------------------------------------------------------

class EnvironmentField:
    """I.i.d. field of positive diagonal matrices, queried by coordinates.

    Immutable; reflect() and shifted() return views onto the same sample.
    geometry: None for the infinite window, or int L for torus periodization.
    """

    def __init__(self, spec: DistributionSpec, seed: int, d: int,
                 geometry: int | None = None,
                 _sign: int = 1, _offset: np.ndarray | None = None):
        spec.validate(d)
        self.spec = spec
        self.seed = int(seed)
        self.d = d
        self.geometry = geometry
        self.kappa = spec.resolve_kappa(d)
        self._sign = _sign
        self._offset = (np.zeros(d, dtype=np.int64) if _offset is None
                        else np.asarray(_offset, dtype=np.int64))
        self._table: np.ndarray | None = None  # torus cache of omega values

    # views ------------------------------------------------------------

    def reflect(self) -> "EnvironmentField":
        """Field whose value at x is this field's value at -x."""
        return EnvironmentField(self.spec, self.seed, self.d, self.geometry,
                                _sign=-self._sign, _offset=self._offset)

    def shifted(self, z) -> "EnvironmentField":
        """Field whose value at x is this field's value at x + z."""
        z = np.asarray(z, dtype=np.int64)
        return EnvironmentField(self.spec, self.seed, self.d, self.geometry,
                                _sign=self._sign,
                                _offset=self._offset + self._sign * z)

    # sampling ----------------------------------------------------------

    def _canonical(self, coords: np.ndarray) -> np.ndarray:
        c = self._offset[None, :] + self._sign * np.asarray(coords, dtype=np.int64)
        if self.geometry is not None:
            c = c % int(self.geometry)
        return c

    def _omega_raw(self, canon: np.ndarray) -> np.ndarray:
        """Sample omega at canonical coordinates, shape (n, d)."""
        n, d = canon.shape
        name = self.spec.name
        if name == "constant":
            diag = np.asarray(self.spec.params.get("diag", np.ones(d)), dtype=float)
            return np.broadcast_to(diag, (n, d)).copy()
        low = self.spec.params.get("low", self.spec.default_low(d))
        key = _hash_coords(self.seed, _TAG_ENV, canon)
        out = np.empty((n, d))
        for i in range(d):
            u = _uniforms(key, i)
            if name == "uniform-diagonal":
                out[:, i] = low + (1.0 - low) * u
            else:  # two-point
                out[:, i] = np.where(u < 0.5, low, 1.0)
        return out

    def omega(self, coords: np.ndarray) -> np.ndarray:
        """Diagonal coefficients at the given (n, d) coordinates."""
        coords = np.asarray(coords, dtype=np.int64)
        single = coords.ndim == 1
        if single:
            coords = coords[None, :]
        canon = self._canonical(coords)
        if self.geometry is not None and self.spec.name != "constant":
            # torus fields are small; tabulate once and gather
            if self._table is None:
                L = int(self.geometry)
                axes = [np.arange(L, dtype=np.int64)] * self.d
                mesh = np.meshgrid(*axes, indexing="ij")
                all_canon = np.stack([m.ravel() for m in mesh], axis=1)
                self._table = self._omega_raw(all_canon)
            L = int(self.geometry)
            idx = np.ravel_multi_index(tuple(canon.T), (L,) * self.d)
            out = self._table[idx]
        else:
            out = self._omega_raw(canon)
        return out[0] if single else out

    def a(self, coords: np.ndarray) -> np.ndarray:
        """Normalized coefficients a_i = omega_i / tr omega; rows sum to 1."""
        w = self.omega(coords)
        return w / w.sum(axis=-1, keepdims=True)

    def kernel(self, coords: np.ndarray) -> np.ndarray:
        """Jump probabilities to (+e1, -e1, +e2, ...), shape (n, 2d)."""
        a = self.a(coords)
        return np.repeat(a / 2.0, 2, axis=-1)

    def a_axis_grids(self, torus_shape: tuple[int, ...]) -> list[np.ndarray]:
        """a_i over the full torus as d grid-shaped arrays (torus geometry)."""
        if self.geometry is None:
            raise ValueError("a_axis_grids requires torus geometry")
        L = int(self.geometry)
        if torus_shape != (L,) * self.d:
            raise ValueError("domain shape does not match torus geometry")
        axes = [np.arange(L, dtype=np.int64)] * self.d
        mesh = np.meshgrid(*axes, indexing="ij")
        coords = np.stack([m.ravel() for m in mesh], axis=1)
        a = self.a(coords)
        return [a[:, i].reshape(torus_shape) for i in range(self.d)]


def sample_environment(spec: DistributionSpec, seed: int, d: int,
                       geometry: int | None = None) -> EnvironmentField:
    """Construct a field; raises EllipticityError on bad parameters."""
    return EnvironmentField(spec, seed, d, geometry)


def psi_eval(env: EnvironmentField, coords: np.ndarray,
             spec: PsiSpec) -> np.ndarray:
    """Evaluate the source functional site-wise; |psi| <= spec.bound."""
    coords = np.asarray(coords, dtype=np.int64)
    single = coords.ndim == 1
    n = 1 if single else len(coords)
    if spec.kind == "constant-one":
        out = np.ones(n)
    elif spec.kind == "first-coefficient":
        a = env.a(coords)
        out = np.atleast_2d(a)[:, 0].copy()
    else:
        w = env.omega(coords)
        out = np.asarray(spec.fn(np.atleast_2d(w)), dtype=float).reshape(n)
        if np.any(np.abs(out) > spec.bound + 1e-12):
            raise ValueError("custom psi exceeded its declared bound")
    return out[0] if single else out
