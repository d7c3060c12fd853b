"""Grids on the cube Q = [-pi, pi]^n, fields, and discrete calculus.

The computational domain Omega = [-a, a]^n is a sub-box whose faces lie
exactly on grid nodes (the requested half-width is snapped to the grid).
All finite differences are second order: central in the interior,
one-sided at array edges.  Quadratures are trapezoidal.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

__all__ = [
    "Grid", "ScalarField", "VectorField", "BoundaryFunction",
    "grad", "div_gamma_grad", "quad_omega", "quad_boundary", "c1_norm",
    "NonPositiveGamma", "GridMismatch",
]


class NonPositiveGamma(ValueError):
    pass


class GridMismatch(ValueError):
    pass


class Grid:
    """Uniform tensor grid on Q = [-pi, pi]^n containing Omega = [-a, a]^n.

    Parameters
    ----------
    n : spatial dimension (2 or 3 supported; 3 required for recovery).
    N : nodes per axis on Q, including both endpoints; spacing 2*pi/(N-1).
    a : requested Omega half-width; snapped to the nearest node so the
        Omega node set is a subset of the Q node set.  Strict containment
        a + h < pi is enforced.
    """

    def __init__(self, n: int, N: int, a: float = 1.0):
        if n < 2:
            raise ValueError("need n >= 2")
        if N < 9:
            raise ValueError("need at least 9 nodes per axis")
        self.n = int(n)
        self.N = int(N)
        self.h = 2 * np.pi / (self.N - 1)
        self.axis = -np.pi + self.h * np.arange(self.N)
        hi = int(round((a + np.pi) / self.h))
        lo = self.N - 1 - hi
        if hi <= lo:
            raise ValueError(f"requested a={a} snaps to an empty box")
        if hi > self.N - 3:
            raise ValueError(f"requested a={a} violates a + h < pi")
        self.hi = hi
        self.lo = lo
        self.a = float(self.axis[hi])
        self.omega_slices = (slice(lo, hi + 1),) * self.n
        self.omega_shape = (hi - lo + 1,) * self.n
        payload = f"grid:n={self.n}:N={self.N}:hi={self.hi}"
        self.grid_id = hashlib.sha256(payload.encode()).hexdigest()[:12]

    # -- geometry ---------------------------------------------------------

    def coords(self, domain: str = "Q") -> np.ndarray:
        """Node coordinates, shape (n,) + spatial shape."""
        ax = self.axis if domain == "Q" else self.axis[self.lo:self.hi + 1]
        mesh = np.meshgrid(*([ax] * self.n), indexing="ij")
        return np.stack(mesh)

    @property
    def omega_axis(self) -> np.ndarray:
        return self.axis[self.lo:self.hi + 1]

    def shape(self, domain: str) -> tuple:
        return (self.N,) * self.n if domain == "Q" else self.omega_shape

    def boundary_mask(self) -> np.ndarray:
        """Mask of the Omega-box surface nodes, on the Omega subarray."""
        mask = np.zeros(self.omega_shape, dtype=bool)
        for ax in range(self.n):
            sl = [slice(None)] * self.n
            sl[ax] = 0
            mask[tuple(sl)] = True
            sl[ax] = -1
            mask[tuple(sl)] = True
        return mask

    def interior_slices(self) -> tuple:
        return (slice(1, -1),) * self.n

    def fits_rotation_ball(self) -> bool:
        """Whether Omega fits in the ball of radius pi - h (any rotation
        of the box then stays inside Q)."""
        return self.a * np.sqrt(self.n) <= np.pi - self.h

    def trapezoid_weights_1d(self) -> np.ndarray:
        w = np.full(self.hi - self.lo + 1, self.h)
        w[0] = w[-1] = self.h / 2
        return w

    def snapshot(self, fields: dict) -> str:
        """JSON snapshot: grid metadata plus node-major flat arrays."""
        doc = {
            "grid": {"n": self.n, "N": self.N, "a": self.a, "h": self.h,
                     "grid_id": self.grid_id},
            "fields": {},
        }
        for name, field in fields.items():
            vals = np.asarray(field.values)
            doc["fields"][name] = {
                "domain": field.domain,
                "shape": list(vals.shape),
                "re": vals.real.reshape(-1).tolist(),
                "im": vals.imag.reshape(-1).tolist(),
            }
        return json.dumps(doc)

    def __eq__(self, other):
        return isinstance(other, Grid) and self.grid_id == other.grid_id

    def __hash__(self):
        return hash(self.grid_id)

    def __repr__(self):
        return f"Grid(n={self.n}, N={self.N}, a={self.a:.6f})"


class ScalarField:
    """Complex nodal values on the Q grid or the Omega subgrid."""

    def __init__(self, grid: Grid, values, domain: str = "Q"):
        if domain not in ("Q", "omega"):
            raise ValueError("domain must be 'Q' or 'omega'")
        values = np.asarray(values, dtype=complex)
        if values.shape != grid.shape(domain):
            raise GridMismatch(
                f"values shape {values.shape} != {grid.shape(domain)}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field contains non-finite values")
        self.grid = grid
        self.values = values
        self.domain = domain

    @classmethod
    def from_callable(cls, grid, fn, domain: str = "Q"):
        return cls(grid, np.asarray(fn(grid.coords(domain)), dtype=complex), domain)

    def restrict_omega(self) -> "ScalarField":
        if self.domain == "omega":
            return self
        return ScalarField(self.grid, self.values[self.grid.omega_slices], "omega")

    def _like(self, values):
        return ScalarField(self.grid, values, self.domain)

    def __add__(self, other):
        return self._like(self.values + _vals(other, self))

    def __sub__(self, other):
        return self._like(self.values - _vals(other, self))

    def __mul__(self, other):
        return self._like(self.values * _vals(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return self._like(-self.values)


def _vals(x, ref: ScalarField):
    if isinstance(x, ScalarField):
        if x.grid != ref.grid or x.domain != ref.domain:
            raise GridMismatch("field domains differ")
        return x.values
    return x


class VectorField:
    """One complex component per axis; values shape (n,) + spatial."""

    def __init__(self, grid: Grid, values, domain: str = "Q"):
        values = np.asarray(values, dtype=complex)
        if values.shape != (grid.n,) + grid.shape(domain):
            raise GridMismatch("vector field shape mismatch")
        self.grid = grid
        self.values = values
        self.domain = domain

    def component(self, axis: int) -> ScalarField:
        return ScalarField(self.grid, self.values[axis], self.domain)

    def dot(self, other: "VectorField") -> ScalarField:
        if self.domain != other.domain:
            raise GridMismatch("vector field domains differ")
        return ScalarField(self.grid, np.sum(self.values * other.values, axis=0),
                           self.domain)


def _face_slice(n: int, axis: int, side: int) -> tuple:
    sl = [slice(None)] * n
    sl[axis] = side
    return tuple(sl)


class BoundaryFunction:
    """Values on the Omega-box surface nodes, stored per face.

    Boundary data is single valued so its faces agree on shared edges,
    but flux-like quantities carry one value per outward normal; the
    per-face storage keeps face quadratures second order at the edges.
    `values` is the assembled Omega-shaped view (later axes win on
    edges), used for Dirichlet data and display.
    """

    def __init__(self, grid: Grid, values=None, faces=None):
        self.grid = grid
        n = grid.n
        if faces is None:
            values = np.asarray(values, dtype=complex)
            if values.shape != grid.omega_shape:
                raise GridMismatch("boundary values must be on the Omega subarray")
            faces = {}
            for ax in range(n):
                for side in (0, -1):
                    faces[(ax, side)] = values[_face_slice(n, ax, side)].astype(complex)
        self.faces = {k: np.asarray(v, dtype=complex) for k, v in faces.items()}
        face_shape = tuple(grid.omega_shape[:1] * (n - 1))
        for key, arr in self.faces.items():
            if arr.shape != grid.omega_shape[1:]:
                raise GridMismatch(f"face {key} has shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError("boundary data contains non-finite values")
        assembled = np.zeros(grid.omega_shape, dtype=complex)
        for ax in range(n):
            for side in (0, -1):
                assembled[_face_slice(n, ax, side)] = self.faces[(ax, side)]
        self.values = assembled
        self.mask = grid.boundary_mask()
        del face_shape

    @classmethod
    def from_callable(cls, grid: Grid, fn) -> "BoundaryFunction":
        return cls(grid, np.asarray(fn(grid.coords("omega")), dtype=complex))

    @classmethod
    def constant(cls, grid: Grid, value) -> "BoundaryFunction":
        return cls(grid, np.full(grid.omega_shape, value, dtype=complex))

    def face(self, axis: int, side: int) -> np.ndarray:
        return self.faces[(axis, side)]

    def max_abs(self) -> float:
        return float(max(np.max(np.abs(arr)) for arr in self.faces.values()))

    def is_real(self, tol=0.0) -> bool:
        return all(float(np.max(np.abs(arr.imag))) <= tol
                   for arr in self.faces.values())

    def scaled(self, factor) -> "BoundaryFunction":
        return BoundaryFunction(self.grid,
                                faces={k: v * factor for k, v in self.faces.items()})

    def __add__(self, other):
        if self.grid != other.grid:
            raise GridMismatch("boundary data on different grids")
        return BoundaryFunction(
            self.grid,
            faces={k: self.faces[k] + other.faces[k] for k in self.faces})

    def __sub__(self, other):
        if self.grid != other.grid:
            raise GridMismatch("boundary data on different grids")
        return BoundaryFunction(
            self.grid,
            faces={k: self.faces[k] - other.faces[k] for k in self.faces})


# -- discrete calculus ----------------------------------------------------

def grad(u: ScalarField) -> VectorField:
    """Second-order gradient: central inside, one-sided at array edges."""
    comps = np.gradient(u.values, u.grid.h, edge_order=2)
    if u.grid.n == 1:
        comps = [comps]
    return VectorField(u.grid, np.stack(comps), u.domain)


def div_gamma_grad(gamma_node: ScalarField, u: ScalarField) -> ScalarField:
    """Conservative flux stencil for div(gamma grad u).

    Face conductivities are arithmetic node averages.  Values are
    produced at interior nodes of the array; the outermost layer is
    left zero.
    """
    if gamma_node.domain != u.domain or gamma_node.grid != u.grid:
        raise GridMismatch("gamma and u must share a grid and domain")
    g = gamma_node.values
    if np.any(g.real <= 0) or np.any(np.abs(g.imag) > 0):
        raise NonPositiveGamma("gamma must be real positive on all nodes")
    g = g.real
    h2 = u.grid.h ** 2
    out = np.zeros_like(u.values)
    n = u.grid.n
    core = [slice(1, -1)] * n
    for ax in range(n):
        up = list(core)
        dn = list(core)
        up[ax] = slice(2, None)
        dn[ax] = slice(0, -2)
        mid = tuple(core)
        up = tuple(up)
        dn = tuple(dn)
        g_up = 0.5 * (g[mid] + g[up])
        g_dn = 0.5 * (g[mid] + g[dn])
        out[mid] += (g_up * (u.values[up] - u.values[mid])
                     - g_dn * (u.values[mid] - u.values[dn])) / h2
    return ScalarField(u.grid, out, u.domain)


def quad_omega(f: ScalarField) -> complex:
    """Trapezoidal integral of f over Omega."""
    vals = f.restrict_omega().values
    w1 = f.grid.trapezoid_weights_1d()
    out = vals
    for ax in range(f.grid.n - 1, -1, -1):
        out = np.tensordot(out, w1, axes=([ax], [0]))
    return complex(out)


def quad_boundary(f, g=None) -> complex:
    """Trapezoidal integral of f*g over the faces of the Omega box,
    each face integrated with its own per-face values."""
    grid = f.grid
    if g is not None and g.grid != grid:
        raise GridMismatch("boundary integrands on different grids")
    w1 = grid.trapezoid_weights_1d()
    total = 0.0 + 0.0j
    for ax in range(grid.n):
        for side in (0, -1):
            face = f.face(ax, side)
            if g is not None:
                face = face * g.face(ax, side)
            out = face
            for k in range(grid.n - 2, -1, -1):
                out = np.tensordot(out, w1, axes=([k], [0]))
            total += complex(out)
    return complex(total)


def c1_norm(f: ScalarField, region: str = "omega") -> float:
    """max |f| plus max |discrete gradient component| over the region."""
    gvals = grad(f).values
    if region == "omega" and f.domain == "Q":
        sl = f.grid.omega_slices
        vals = f.values[sl]
        gvals = gvals[(slice(None),) + sl]
    else:
        vals = f.values
    return float(np.max(np.abs(vals)) + np.max(np.abs(gvals)))
