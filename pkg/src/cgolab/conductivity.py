"""Truncated-Taylor conductivity models gamma(x, rho, mu).

A model is a positive closed-form base gamma0(x) plus symmetric tensor
coefficients of rank k = 1..K over d = n+1 slots (slot 0 couples to the
solution value, slots 1..n to its gradient), each stored as closed-form
expressions so evaluation works on arbitrary (rotated) point sets.
"""

from __future__ import annotations

import math

import numpy as np

from .expressions import Const, Expr, laplacian, parse_expr
from .fields import Grid, NonPositiveGamma, ScalarField, VectorField
from .tensors import index_multiplicity, sym_index_count, sym_indices

__all__ = [
    "SymTensorExpr", "ConductivityModel", "RadiusExceeded",
    "eval_conductivity", "gamma_partials", "q_potential",
]


class RadiusExceeded(ValueError):
    pass


def _as_expr(value) -> Expr:
    if isinstance(value, Expr):
        return value
    if isinstance(value, str):
        return parse_expr(value)
    return Const(value)


class SymTensorExpr:
    """Symmetric tensor with expression-valued coefficients.

    Entries are keyed by nondecreasing multi-indices over range(dim);
    missing entries are zero.
    """

    def __init__(self, dim: int, rank: int, entries=None):
        self.dim = int(dim)
        self.rank = int(rank)
        self.indices = sym_indices(self.dim, self.rank)
        self._pos = {idx: i for i, idx in enumerate(self.indices)}
        self.entries = {}
        for idx, value in (entries or {}).items():
            self[idx] = value

    def __setitem__(self, index, value):
        key = tuple(sorted(index))
        if key not in self._pos:
            raise KeyError(f"bad index {index} for dim {self.dim} rank {self.rank}")
        self.entries[key] = _as_expr(value)

    def __getitem__(self, index) -> Expr:
        return self.entries.get(tuple(sorted(index)), Const(0.0))

    def eval(self, coords) -> np.ndarray:
        """Coefficient arrays in stored order, shape (ncoeff,) + spatial."""
        shape = np.asarray(coords).shape[1:]
        out = np.zeros((sym_index_count(self.dim, self.rank),) + shape,
                       dtype=complex)
        for idx, expr in self.entries.items():
            out[self._pos[idx]] = expr(coords)
        return out

    def scaled(self, factor: float) -> "SymTensorExpr":
        out = SymTensorExpr(self.dim, self.rank)
        for idx, expr in self.entries.items():
            out[idx] = expr * factor
        return out

    def plus(self, other: "SymTensorExpr") -> "SymTensorExpr":
        out = SymTensorExpr(self.dim, self.rank)
        for idx in set(self.entries) | set(other.entries):
            out[idx] = self[idx] + other[idx]
        return out


class ConductivityModel:
    """gamma(x, rho, mu) = gamma0(x) + sum_k (1/k!) gamma_k(x; (rho,mu)^k).

    taylor[k-1] holds the rank-k coefficient tensor over n+1 slots.
    `radius` bounds the pointwise Euclidean norm of (u, grad u) for which
    the truncation is declared valid (default: unbounded).
    """

    def __init__(self, n: int, gamma0, taylor=(), radius: float = float("inf"),
                 name: str = "model", complete: bool = True):
        self.n = int(n)
        self.gamma0 = _as_expr(gamma0)
        self.taylor = list(taylor)
        for k, t in enumerate(self.taylor, start=1):
            if t.dim != self.n + 1 or t.rank != k:
                raise ValueError(f"taylor[{k - 1}] must have dim n+1 and rank {k}")
        self.radius = float(radius)
        self.name = name
        # polynomial truncations are exact; set complete=False for a
        # model that merely truncates a longer series
        self.complete = bool(complete)

    @property
    def K(self) -> int:
        return len(self.taylor)

    def validate_on(self, grid: Grid) -> None:
        vals = self.gamma0(grid.coords("Q"))
        if np.any(vals <= 0):
            raise NonPositiveGamma(f"gamma0 must be positive on Q (min {vals.min():.3e})")

    def gamma0_field(self, grid: Grid, domain: str = "Q") -> ScalarField:
        self.validate_on(grid)
        return ScalarField(grid, self.gamma0(grid.coords(domain)).astype(complex),
                           domain)

    def base_field(self, grid: Grid, rho: float = 0.0, domain: str = "Q") -> ScalarField:
        """gamma(x, rho, 0) as a nodal field."""
        coords = grid.coords(domain)
        vals = self.gamma0(coords).astype(complex)
        for k, t in enumerate(self.taylor, start=1):
            zero_idx = (0,) * k
            if zero_idx in t.entries:
                vals = vals + (rho ** k / math.factorial(k)) * t.entries[zero_idx](coords)
        field = ScalarField(grid, vals, domain)
        if np.any(field.values.real <= 0):
            raise NonPositiveGamma("gamma(x, rho, 0) is not positive")
        return field

    def recentered_taylor(self, rho: float):
        """Derivative tensors of gamma at (rho, 0), as SymTensorExpr list.

        gamma_tilde_k[I] = sum_{j>=k} rho^(j-k)/(j-k)! * gamma_j[(0,)*(j-k)+I].
        For rho = 0 this returns the stored tensors unchanged.
        """
        if rho == 0.0:
            return list(self.taylor)
        out = []
        for k in range(1, self.K + 1):
            acc = SymTensorExpr(self.n + 1, k)
            for j in range(k, self.K + 1):
                w = rho ** (j - k) / math.factorial(j - k)
                src = self.taylor[j - 1]
                for idx in sym_indices(self.n + 1, k):
                    expr = src[(0,) * (j - k) + idx]
                    if not (expr.is_const() and expr.value == 0.0):
                        acc[idx] = acc[idx] + expr * w
            out.append(acc)
        return out

    def __repr__(self):
        return f"ConductivityModel(n={self.n}, K={self.K}, name={self.name!r})"


def _lam_components(u: ScalarField, gradu: VectorField):
    """(u, grad u) as a list of n+1 nodal arrays."""
    return [u.values] + [gradu.values[j] for j in range(u.grid.n)]


def _poly_eval(tensor: SymTensorExpr, coords, lam):
    """sum over stored indices of coeff * multiplicity * prod lam_j."""
    out = 0.0
    for idx, expr in tensor.entries.items():
        prod = expr(coords).astype(complex)
        for j in idx:
            prod = prod * lam[j]
        out = out + index_multiplicity(idx) * prod
    return out


def eval_conductivity(model: ConductivityModel, u: ScalarField,
                      gradu: VectorField | None = None) -> ScalarField:
    """Nodal gamma(x, u, grad u).

    Raises RadiusExceeded when the pointwise norm of (u, grad u) leaves
    the model's declared convergence radius.
    """
    from .fields import grad as grad_op
    if gradu is None:
        gradu = grad_op(u)
    lam = _lam_components(u, gradu)
    if np.isfinite(model.radius):
        norm = np.sqrt(sum(np.abs(c) ** 2 for c in lam))
        if float(np.max(norm)) > model.radius:
            raise RadiusExceeded(
                f"|(u, grad u)| reaches {float(np.max(norm)):.3g} "
                f"beyond radius {model.radius:.3g}")
    coords = u.grid.coords(u.domain)
    vals = model.gamma0(coords).astype(complex)
    for k, tensor in enumerate(model.taylor, start=1):
        vals = vals + _poly_eval(tensor, coords, lam) / math.factorial(k)
    return ScalarField(u.grid, vals, u.domain)


def gamma_partials(model: ConductivityModel, u: ScalarField,
                   gradu: VectorField) -> np.ndarray:
    """Nodal partial derivatives d gamma / d lambda_j, j = 0..n.

    Needed for the exact Newton linearization; shape (n+1,) + spatial.
    """
    lam = _lam_components(u, gradu)
    coords = u.grid.coords(u.domain)
    shape = u.values.shape
    out = np.zeros((model.n + 1,) + shape, dtype=complex)
    for k, tensor in enumerate(model.taylor, start=1):
        scale = 1.0 / math.factorial(k)
        for idx, expr in tensor.entries.items():
            base = expr(coords).astype(complex) * (index_multiplicity(idx) * scale)
            counts = {}
            for j in idx:
                counts[j] = counts.get(j, 0) + 1
            for j, cnt in counts.items():
                prod = base * cnt
                remaining = list(idx)
                remaining.remove(j)
                for r in remaining:
                    prod = prod * lam[r]
                out[j] += prod
    return out


def q_potential(gamma0, grid: Grid, rotation: np.ndarray | None = None,
                fd_step: float = 1e-2) -> ScalarField:
    """Schroedinger potential q = laplacian(sqrt(gamma0)) / sqrt(gamma0).

    Closed-form differentiation when gamma0 is an expression tree; a
    plain callable falls back to fourth-order pointwise differences
    (valid everywhere because the closed form extends beyond Q).  With
    `rotation` R the potential is sampled at R^T y for grid points y,
    i.e. on the rotated frame.
    """
    coords = grid.coords("Q")
    if rotation is not None:
        flat = coords.reshape(grid.n, -1)
        coords = (rotation.T @ flat).reshape(coords.shape)
    if isinstance(gamma0, str):
        gamma0 = parse_expr(gamma0)
    if isinstance(gamma0, Expr):
        g0 = gamma0(coords)
        if np.any(g0 <= 0):
            raise NonPositiveGamma("gamma0 must be positive on Q")
        root = gamma0 ** 0.5
        q = laplacian(root, grid.n) / root
        return ScalarField(grid, q(coords).astype(complex))
    # callable fallback: 4th-order 5-point second differences per axis
    g0 = np.asarray(gamma0(coords), dtype=float)
    if np.any(g0 <= 0):
        raise NonPositiveGamma("gamma0 must be positive on Q")
    root = np.sqrt(g0)
    lap = np.zeros_like(root)
    for ax in range(grid.n):
        vals = {}
        for step in (-2, -1, 1, 2):
            shifted = coords.copy()
            shifted[ax] = shifted[ax] + step * fd_step
            vals[step] = np.sqrt(np.asarray(gamma0(shifted), dtype=float))
        lap += (-vals[2] + 16 * vals[1] - 30 * root + 16 * vals[-1] - vals[-2]) \
            / (12 * fd_step ** 2)
    return ScalarField(grid, (lap / root).astype(complex))
