"""Dirichlet solves on the Omega box and the boundary flux map.

The linear path solves div(gamma grad u) = source with the conservative
face-average stencil; the quasilinear path runs Newton iterations whose
Jacobian is the exact derivative of the discrete residual, assembled
from the model's Taylor coefficients.  Small boundary data only: the
solver enforces the smallness guard rather than detecting blow-up.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .conductivity import ConductivityModel, eval_conductivity, gamma_partials
from .fields import (BoundaryFunction, Grid, NonPositiveGamma, ScalarField,
                     VectorField, quad_boundary)

__all__ = [
    "SolveConfig", "DtnSample", "OmegaOperator",
    "solve_linear", "solve_quasilinear", "dtn", "dtn_linear",
    "LinearSolveFailure", "SmallnessViolated", "NewtonDiverged",
]


class LinearSolveFailure(RuntimeError):
    pass


class SmallnessViolated(ValueError):
    pass


class NewtonDiverged(RuntimeError):
    pass


@dataclass
class SolveConfig:
    newton_tol: float = 1e-11      # relative nonlinear residual
    max_newton: int = 25
    linear_tol: float = 1e-12     # relative inner residual
    smallness_guard: float = 0.1  # max allowed |f| on the boundary

    def __post_init__(self):
        if min(self.newton_tol, self.linear_tol, self.smallness_guard) <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_newton < 1:
            raise ValueError("max_newton must be >= 1")
        if self.newton_tol < self.linear_tol:
            raise ValueError("newton_tol must be >= linear_tol")


@dataclass
class DtnSample:
    """Boundary current density gamma(x, u, grad u) d_nu u."""
    flux: BoundaryFunction
    conservation_residual: float


# -- geometry caches -------------------------------------------------------

_GRAD_CACHE: dict = {}
_LU_CACHE: dict = {}
_CACHE_LOCK = threading.Lock()


def _gradient_matrices(grid: Grid):
    """Sparse per-axis gradient operators on the Omega subarray,
    second order with one-sided rows at the box faces (the np.gradient
    edge_order=2 stencil)."""
    with _CACHE_LOCK:
        if grid.grid_id in _GRAD_CACHE:
            return _GRAD_CACHE[grid.grid_id]
    M = grid.omega_shape[0]
    h = grid.h
    G1 = sp.lil_matrix((M, M))
    for i in range(1, M - 1):
        G1[i, i - 1] = -0.5 / h
        G1[i, i + 1] = 0.5 / h
    G1[0, 0], G1[0, 1], G1[0, 2] = -1.5 / h, 2.0 / h, -0.5 / h
    G1[-1, -1], G1[-1, -2], G1[-1, -3] = 1.5 / h, -2.0 / h, 0.5 / h
    G1 = G1.tocsr()
    eye = sp.identity(M, format="csr")
    mats = []
    for ax in range(grid.n):
        factors = [G1 if k == ax else eye for k in range(grid.n)]
        out = factors[0]
        for f in factors[1:]:
            out = sp.kron(out, f, format="csr")
        mats.append(out)
    with _CACHE_LOCK:
        _GRAD_CACHE[grid.grid_id] = mats
    return mats


def grad_omega(u: ScalarField) -> VectorField:
    """Gradient on the Omega subarray via the cached sparse operators
    (identical stencil to np.gradient, but reusable in Jacobians)."""
    f = u.restrict_omega()
    mats = _gradient_matrices(u.grid)
    flat = f.values.reshape(-1)
    comps = np.stack([ (G @ flat).reshape(f.values.shape) for G in mats ])
    return VectorField(u.grid, comps, "omega")


class OmegaOperator:
    """Discrete div(gamma grad .) on Omega with Dirichlet boundary.

    Splits into an interior-interior matrix and an interior-boundary
    matrix so Dirichlet data moves to the right-hand side.
    """

    def __init__(self, grid: Grid, gamma: ScalarField):
        g = gamma.restrict_omega().values
        if np.any(g.real <= 0) or np.any(np.abs(g.imag) > 1e-14 * np.abs(g.real)):
            raise NonPositiveGamma("gamma must be real positive on Omega")
        self.grid = grid
        self.gamma = g.real
        self.shape = grid.omega_shape
        total = int(np.prod(self.shape))
        flat = np.arange(total).reshape(self.shape)
        interior_mask = np.zeros(self.shape, dtype=bool)
        interior_mask[grid.interior_slices()] = True
        self.interior_idx = flat[interior_mask]
        self.boundary_idx = flat[~interior_mask]
        self.n_int = self.interior_idx.size
        inv = -np.ones(total, dtype=np.int64)
        inv[self.interior_idx] = np.arange(self.n_int)
        self._inv = inv
        self.full = self._assemble(self.gamma)
        self.A = self.full[:, self.interior_idx].tocsc()
        self.Ab = self.full[:, self.boundary_idx].tocsr()
        self._lu = None

    def _assemble(self, g) -> sp.csr_matrix:
        grid = self.grid
        n, h2 = grid.n, grid.h ** 2
        flat = np.arange(int(np.prod(self.shape))).reshape(self.shape)
        core = [slice(1, -1)] * n
        rows, cols, vals = [], [], []
        mid_idx = flat[tuple(core)].ravel()
        for ax in range(n):
            up = list(core)
            dn = list(core)
            up[ax] = slice(2, None)
            dn[ax] = slice(0, -2)
            up, dn = tuple(up), tuple(dn)
            g_up = (0.5 * (g[tuple(core)] + g[up])).ravel() / h2
            g_dn = (0.5 * (g[tuple(core)] + g[dn])).ravel() / h2
            rows.extend([mid_idx, mid_idx, mid_idx])
            cols.extend([flat[up].ravel(), flat[dn].ravel(), mid_idx])
            vals.extend([g_up, g_dn, -(g_up + g_dn)])
        irows = self._inv[np.concatenate(rows)]
        mat = sp.coo_matrix(
            (np.concatenate(vals), (irows, np.concatenate(cols))),
            shape=(self.n_int, int(np.prod(self.shape)))).tocsr()
        return mat

    def flux_sensitivity(self, u_flat) -> sp.csr_matrix:
        """d residual / d gamma_node, rows interior x cols all nodes."""
        grid = self.grid
        n, h2 = grid.n, grid.h ** 2
        flat = np.arange(int(np.prod(self.shape))).reshape(self.shape)
        u = u_flat.reshape(self.shape)
        core = [slice(1, -1)] * n
        rows, cols, vals = [], [], []
        mid_idx = flat[tuple(core)].ravel()
        for ax in range(n):
            up = list(core)
            dn = list(core)
            up[ax] = slice(2, None)
            dn[ax] = slice(0, -2)
            up, dn = tuple(up), tuple(dn)
            du_up = ((u[up] - u[tuple(core)]) / (2 * h2)).ravel()
            du_dn = ((u[dn] - u[tuple(core)]) / (2 * h2)).ravel()
            rows.extend([mid_idx, mid_idx, mid_idx])
            cols.extend([flat[up].ravel(), flat[dn].ravel(), mid_idx])
            vals.extend([du_up, du_dn, du_up + du_dn])
        irows = self._inv[np.concatenate(rows)]
        return sp.coo_matrix(
            (np.concatenate(vals), (irows, np.concatenate(cols))),
            shape=(self.n_int, int(np.prod(self.shape)))).tocsr()

    def lu(self):
        if self._lu is None:
            key = (self.grid.grid_id,
                   hashlib.sha256(self.gamma.tobytes()).hexdigest())
            with _CACHE_LOCK:
                cached = _LU_CACHE.get(key)
            if cached is None:
                cached = spla.splu(self.A.tocsc())
                with _CACHE_LOCK:
                    _LU_CACHE[key] = cached
            self._lu = cached
        return self._lu

    def solve_with_data(self, boundary_values, source=None, tol=1e-12):
        """Solve A u_int = source - Ab u_b; refine iteratively to `tol`."""
        ub = boundary_values.reshape(-1)[self.boundary_idx]
        rhs = -(self.Ab @ ub)
        if source is not None:
            rhs = rhs + source.reshape(-1)[self.interior_idx]
        lu = self.lu()

        def solve_complex(b):
            if np.iscomplexobj(b):
                return lu.solve(b.real) + 1j * lu.solve(b.imag)
            return lu.solve(b)

        x = solve_complex(rhs)
        scale = max(float(np.max(np.abs(rhs))), 1e-300)
        for _ in range(5):
            r = rhs - self.A @ x
            if float(np.max(np.abs(r))) <= tol * scale:
                break
            x = x + solve_complex(r)
        else:
            r = rhs - self.A @ x
            if float(np.max(np.abs(r))) > 10 * tol * scale:
                raise LinearSolveFailure(
                    f"residual stagnated at {float(np.max(np.abs(r))):.3e}")
        out = np.zeros(int(np.prod(self.shape)), dtype=complex)
        out[self.boundary_idx] = ub
        out[self.interior_idx] = x
        return out.reshape(self.shape)


def solve_linear(gamma_node: ScalarField, f: BoundaryFunction,
                 cfg: SolveConfig | None = None,
                 source: np.ndarray | None = None) -> ScalarField:
    """Dirichlet solve of div(gamma grad u) = div_h(source terms) on Omega.

    Boundary values are matched exactly on the box faces; the interior
    residual is driven below linear_tol relative to the data scale.
    """
    cfg = cfg or SolveConfig()
    grid = gamma_node.grid
    op = OmegaOperator(grid, gamma_node)
    vals = op.solve_with_data(f.values, source=source, tol=cfg.linear_tol)
    return ScalarField(grid, vals, "omega")


def solve_quasilinear(model: ConductivityModel, rho: float,
                      f: BoundaryFunction,
                      cfg: SolveConfig | None = None,
                      trace: list | None = None) -> ScalarField:
    """Newton iteration for div(gamma(x, u, grad u) grad u) = 0, u = rho + f.

    Real boundary data only; complex probes go through the linearized
    hierarchy instead.  Residual history may be collected in `trace`.
    """
    cfg = cfg or SolveConfig()
    grid = f.grid
    if not f.is_real(tol=0.0):
        raise SmallnessViolated("nonlinear Newton path accepts real data only")
    if f.max_abs() > cfg.smallness_guard:
        raise SmallnessViolated(
            f"|f| = {f.max_abs():.3g} exceeds guard {cfg.smallness_guard}")

    base = model.base_field(grid, rho, domain="omega")
    u = solve_linear(base, f, cfg)
    u = ScalarField(grid, (u.values + rho).real.astype(complex), "omega")
    bvals = (f.values + rho)

    op_geom = OmegaOperator(grid, base)  # reused for index bookkeeping
    mats = _gradient_matrices(grid)
    total = int(np.prod(grid.omega_shape))

    def residual_and_gamma(u_field):
        gu = grad_omega(u_field)
        gamma_node = eval_conductivity(model, u_field, gu)
        from .fields import div_gamma_grad
        res = div_gamma_grad(gamma_node, u_field).values
        return res, gamma_node, gu

    res, gamma_node, gu = residual_and_gamma(u)
    res_int = res.reshape(-1)[op_geom.interior_idx]
    res0 = max(float(np.max(np.abs(res_int))), 1e-300)
    history = [float(np.max(np.abs(res_int)))]
    if trace is not None:
        trace.append(history[0])
    floor = 1e-15 * max(1.0, float(np.max(np.abs(gamma_node.values))))
    bad_steps = 0
    for _ in range(cfg.max_newton):
        if history[-1] <= cfg.newton_tol * res0 or history[-1] <= floor:
            break
        op = OmegaOperator(grid, gamma_node)
        parts = gamma_partials(model, u, gu)
        # d gamma / d u = diag(d/d lam_0) + sum_beta diag(d/d lam_beta) G_beta
        C = sp.diags(parts[0].reshape(-1).real)
        for beta in range(grid.n):
            C = C + sp.diags(parts[beta + 1].reshape(-1).real) @ mats[beta]
        S = op.flux_sensitivity(u.values.reshape(-1).real)
        J_full = op.full + S @ C.tocsr()
        J = J_full[:, op.interior_idx].tocsc()
        try:
            delta = spla.splu(J).solve(-res_int.real)
        except RuntimeError as err:
            raise LinearSolveFailure(f"Newton linearization failed: {err}")
        new_vals = u.values.reshape(-1).real.copy()
        new_vals[op.interior_idx] += delta
        new_vals[op.boundary_idx] = bvals.reshape(-1)[op.boundary_idx].real
        u = ScalarField(grid, new_vals.reshape(grid.omega_shape).astype(complex),
                        "omega")
        res, gamma_node, gu = residual_and_gamma(u)
        res_int = res.reshape(-1)[op_geom.interior_idx]
        history.append(float(np.max(np.abs(res_int))))
        if trace is not None:
            trace.append(history[-1])
        if history[-1] >= history[-2]:
            bad_steps += 1
            if bad_steps >= 3:
                raise NewtonDiverged(
                    f"residual non-decreasing for 3 steps: {history[-4:]}")
        else:
            bad_steps = 0
    else:
        if history[-1] > cfg.newton_tol * res0 and history[-1] > floor:
            raise NewtonDiverged(
                f"no convergence in {cfg.max_newton} steps "
                f"(last residual {history[-1]:.3e})")
    return u


def normal_derivative_faces(u_vals, grid: Grid) -> dict:
    """One-sided second-order d_nu u per face: {(axis, side): array}."""
    h = grid.h
    n = grid.n
    faces = {}
    for ax in range(n):
        def take(i):
            s = [slice(None)] * n
            s[ax] = i
            return u_vals[tuple(s)]

        faces[(ax, -1)] = (3 * take(-1) - 4 * take(-2) + take(-3)) / (2 * h)
        faces[(ax, 0)] = (3 * take(0) - 4 * take(1) + take(2)) / (2 * h)
    return faces


def _flux_boundary_function(gamma_vals, u_vals, grid: Grid) -> BoundaryFunction:
    dnu = normal_derivative_faces(u_vals, grid)
    faces = {}
    for (ax, side), arr in dnu.items():
        s = [slice(None)] * grid.n
        s[ax] = side
        faces[(ax, side)] = gamma_vals[tuple(s)] * arr
    return BoundaryFunction(grid, faces=faces)


def dtn(model: ConductivityModel, u: ScalarField) -> DtnSample:
    """Boundary flux gamma(x, u, grad u) d_nu u of a converged solution."""
    uo = u.restrict_omega()
    gu = grad_omega(uo)
    gamma_node = eval_conductivity(model, uo, gu)
    flux = _flux_boundary_function(gamma_node.values, uo.values, u.grid)
    return DtnSample(flux, float(abs(quad_boundary(flux))))


def dtn_linear(gamma_node: ScalarField, u: ScalarField) -> DtnSample:
    """Boundary flux gamma d_nu u with a fixed nodal conductivity."""
    uo = u.restrict_omega()
    go = gamma_node.restrict_omega()
    flux = _flux_boundary_function(go.values, uo.values, u.grid)
    return DtnSample(flux, float(abs(quad_boundary(flux))))
