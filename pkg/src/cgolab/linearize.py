"""Higher-order linearization of the boundary map.

Two independent routes to the m-th mixed derivative of the flux with
boundary data sum(eps_l f_l):

* a central tensor-product finite-difference stencil over 2^m nonlinear
  solves (`mixed_dtn_fd`), and
* the exact linear hierarchy (`solve_hierarchy`): first-order solves
  v_l, then mixed terms w_S for every index subset S, each solving the
  base equation with a divergence-form source assembled from lower
  terms and the model's derivative tensors at (rho, 0).

`dtn_pairing` evaluates the measurement functional: the m-th derivative
flux difference of two models paired against a test function on the
boundary.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .conductivity import ConductivityModel
from .fields import (BoundaryFunction, Grid, GridMismatch, ScalarField,
                     VectorField, quad_boundary)
from .forward import (OmegaOperator, SolveConfig, dtn, grad_omega,
                      solve_quasilinear)
from .tensors import sym_indices

__all__ = [
    "ProbeSet", "HierarchyResult", "TruncationTooLow",
    "mixed_dtn_fd", "solve_hierarchy", "hierarchy_dtn_flux", "dtn_pairing",
]


class TruncationTooLow(ValueError):
    pass


@dataclass
class ProbeSet:
    """Boundary probes f_1..f_m plus a test function for the pairing."""

    fs: list
    f_test: BoundaryFunction
    eps_step: float = 0.05
    rho: float = 0.0

    def __post_init__(self):
        if not self.fs:
            raise ValueError("need at least one probe")
        grid = self.fs[0].grid
        for f in list(self.fs) + [self.f_test]:
            if f.grid != grid:
                raise GridMismatch("probes live on different grids")

    @property
    def m(self) -> int:
        return len(self.fs)

    @property
    def grid(self) -> Grid:
        return self.fs[0].grid

    def check_smallness(self, guard: float):
        worst = self.eps_step * sum(f.max_abs() for f in self.fs)
        if worst > guard:
            raise ValueError(
                f"eps-stencil data reaches {worst:.3g}, beyond guard {guard}")


@dataclass
class HierarchyResult:
    v: list                      # first-order solutions, one per probe
    w: ScalarField               # full m-th mixed term
    source: VectorField          # assembled divergence-form source for w
    mixed: dict = field(default_factory=dict)  # subset -> ScalarField


def _labeled_partitions(size: int, nblocks: int):
    """All ways to place `size` labeled items into `nblocks` labeled
    nonempty blocks; returned as tuples of index-tuples."""
    out = []
    for assign in itertools.product(range(nblocks), repeat=size):
        blocks = [tuple(i for i, a in enumerate(assign) if a == b)
                  for b in range(nblocks)]
        if all(blocks):
            out.append(tuple(blocks))
    return out


_PARTITION_CACHE: dict = {}


def labeled_partitions(size, nblocks):
    key = (size, nblocks)
    if key not in _PARTITION_CACHE:
        _PARTITION_CACHE[key] = _labeled_partitions(size, nblocks)
    return _PARTITION_CACHE[key]


class _Workspace:
    """Per-(model, grid, rho) data shared by hierarchy solves."""

    def __init__(self, model: ConductivityModel, grid: Grid, rho: float):
        self.model = model
        self.grid = grid
        self.rho = rho
        self.base = model.base_field(grid, rho, domain="omega")
        self.op = OmegaOperator(grid, self.base)
        coords = grid.coords("omega")
        self.tensors = []
        for t in model.recentered_taylor(rho):
            entries = {idx: expr(coords).astype(complex)
                       for idx, expr in t.entries.items()}
            self.tensors.append(entries)

    def contract(self, k: int, vecs) -> np.ndarray:
        """gamma_tilde_k(vec_1, ..., vec_k) pointwise on Omega.

        vecs: list of k arrays of shape (n+1,) + omega_shape.
        """
        entries = self.tensors[k - 1]
        out = np.zeros(self.grid.omega_shape, dtype=complex)
        for idx, C in entries.items():
            for perm in sorted(set(itertools.permutations(idx))):
                term = C.copy()
                for slot, j in enumerate(perm):
                    term *= vecs[slot][j]
                out += term
        return out


def _stencil_apply(coeff: np.ndarray, w: np.ndarray, grid: Grid) -> np.ndarray:
    """Conservative stencil value of div(coeff grad w) with arithmetic
    face averages, for complex nodal coefficients.  This is exactly the
    derivative structure of the nonlinear residual, so hierarchy and
    finite-difference routes share one discretization."""
    out = np.zeros(grid.omega_shape, dtype=complex)
    h2 = grid.h ** 2
    core = [slice(1, -1)] * grid.n
    mid = tuple(core)
    for ax in range(grid.n):
        up = list(core)
        dn = list(core)
        up[ax] = slice(2, None)
        dn[ax] = slice(0, -2)
        up, dn = tuple(up), tuple(dn)
        c_up = 0.5 * (coeff[mid] + coeff[up])
        c_dn = 0.5 * (coeff[mid] + coeff[dn])
        out[mid] += (c_up * (w[up] - w[mid]) - c_dn * (w[mid] - w[dn])) / h2
    return out


def _lam_vector(w: ScalarField) -> np.ndarray:
    """(w, grad w) as an (n+1,) + omega_shape array."""
    g = grad_omega(w)
    return np.concatenate([w.values[None], g.values], axis=0)


def solve_hierarchy(model: ConductivityModel, probes: ProbeSet,
                    cfg: SolveConfig | None = None) -> HierarchyResult:
    """All mixed derivative terms of the solution at eps = 0.

    Computes w_S for every nonempty subset S of probes in order of
    size; w_S solves the base equation with zero boundary values and a
    divergence source built from derivative tensors contracted with
    lower-order terms.
    """
    cfg = cfg or SolveConfig()
    m = probes.m
    if m >= 2 and not model.complete and model.K < m - 1:
        raise TruncationTooLow(
            f"order-{m} hierarchy needs Taylor rank {m - 1}, model has K={model.K}")
    ws = _Workspace(model, probes.grid, probes.rho)
    mixed: dict = {}
    lam: dict = {}
    source_full = None
    subsets = []
    for size in range(1, m + 1):
        subsets.extend(itertools.combinations(range(m), size))
    for S in subsets:
        s = len(S)
        if s == 1:
            vals = ws.op.solve_with_data(probes.fs[S[0]].values,
                                         tol=cfg.linear_tol)
            w = ScalarField(probes.grid, vals, "omega")
        else:
            rhs, V = _assemble_source(ws, S, mixed, lam)
            zero = np.zeros(probes.grid.omega_shape, dtype=complex)
            vals = ws.op.solve_with_data(zero, source=-rhs, tol=cfg.linear_tol)
            w = ScalarField(probes.grid, vals, "omega")
            if s == m:
                source_full = VectorField(probes.grid, V, "omega")
        mixed[S] = w
        lam[S] = _lam_vector(w)
    v = [mixed[(l,)] for l in range(m)]
    if m == 1:
        source_full = VectorField(
            probes.grid, np.zeros((probes.grid.n,) + probes.grid.omega_shape),
            "omega")
    return HierarchyResult(v=v, w=mixed[tuple(range(m))], source=source_full,
                           mixed=mixed)


def _assemble_source(ws: _Workspace, S, mixed, lam):
    """Source for the subset S (size >= 2): sum_k (1/k!) over labeled
    partitions (B_1..B_k; B_last) of the stencil applied with nodal
    coefficient gamma_tilde_k((w_{B_1}, grad w_{B_1}), ...) to w_{B_last}.

    Returns (stencil values, nodal divergence-form vector) -- the former
    drives the solve (it is the exact derivative of the discrete
    residual), the latter reports the assembled source field.
    """
    grid = ws.grid
    s = len(S)
    rhs = np.zeros(grid.omega_shape, dtype=complex)
    V = np.zeros((grid.n,) + grid.omega_shape, dtype=complex)
    kmax = min(s - 1, len(ws.tensors))
    for k in range(1, kmax + 1):
        scale = 1.0 / math.factorial(k)
        for blocks in labeled_partitions(s, k + 1):
            sub = [tuple(S[i] for i in b) for b in blocks]
            vecs = [lam[tuple(sorted(b))] for b in sub[:-1]]
            coeff = ws.contract(k, vecs) * scale
            last = tuple(sorted(sub[-1]))
            rhs += _stencil_apply(coeff, mixed[last].values, grid)
            V += coeff[None] * lam[last][1:]
    return rhs, V


def hierarchy_dtn_flux(model: ConductivityModel, probes: ProbeSet,
                       result: HierarchyResult | None = None,
                       cfg: SolveConfig | None = None) -> BoundaryFunction:
    """m-th mixed derivative of the boundary flux from hierarchy terms:
    gamma(x,rho,0) d_nu w plus the derivative-tensor flux terms."""
    cfg = cfg or SolveConfig()
    if result is None:
        result = solve_hierarchy(model, probes, cfg)
    grid = probes.grid
    m = probes.m
    ws = _Workspace(model, grid, probes.rho)
    lam = {S: _lam_vector(w) for S, w in result.mixed.items()}
    # prefactor field in front of d_nu w_B, accumulated per subset B
    prefactors = {tuple(range(m)): ws.base.values.astype(complex)}
    kmax = min(m - 1, len(ws.tensors))
    for k in range(1, kmax + 1):
        scale = 1.0 / math.factorial(k)
        for blocks in labeled_partitions(m, k + 1):
            vecs = [lam[tuple(sorted(b))] for b in blocks[:-1]]
            coeff = ws.contract(k, vecs) * scale
            key = tuple(sorted(blocks[-1]))
            prefactors[key] = prefactors.get(key, 0) + coeff
    # per-face assembly, matching dtn()'s one-sided stencils exactly
    from .forward import normal_derivative_faces
    faces: dict = {}
    for B, pref in prefactors.items():
        dnu = normal_derivative_faces(result.mixed[B].values, grid)
        for (ax, side), arr in dnu.items():
            s2 = [slice(None)] * grid.n
            s2[ax] = side
            p = pref[tuple(s2)] if not np.isscalar(pref) else pref
            faces[(ax, side)] = faces.get((ax, side), 0) + p * arr
    return BoundaryFunction(grid, faces=faces)


def mixed_dtn_fd(model: ConductivityModel, probes: ProbeSet,
                 cfg: SolveConfig | None = None,
                 richardson: bool = False) -> BoundaryFunction:
    """m-th mixed derivative of the flux by the central product stencil:
    (1/(2 h_eps)^m) sum over sign patterns of prod(signs) times the
    nonlinear flux.  O(h_eps^2); `richardson` combines h and h/2."""
    cfg = cfg or SolveConfig()

    def stencil(eps):
        m = probes.m
        grid = probes.grid
        faces: dict = {}
        for signs in itertools.product((-1.0, 1.0), repeat=m):
            vals = np.zeros(grid.omega_shape, dtype=complex)
            for s, f in zip(signs, probes.fs):
                vals = vals + s * eps * f.values
            f_all = BoundaryFunction(grid, vals)
            u = solve_quasilinear(model, probes.rho, f_all, cfg)
            sample = dtn(model, u)
            w = np.prod(signs)
            for key, arr in sample.flux.faces.items():
                faces[key] = faces.get(key, 0) + w * arr
        scale = (2 * eps) ** m
        return {k: v / scale for k, v in faces.items()}

    probes.check_smallness(cfg.smallness_guard)
    coarse = stencil(probes.eps_step)
    if not richardson:
        return BoundaryFunction(probes.grid, faces=coarse)
    fine = stencil(probes.eps_step / 2)
    return BoundaryFunction(
        probes.grid,
        faces={k: (4 * fine[k] - coarse[k]) / 3 for k in coarse})


def _reference_model(model: ConductivityModel) -> ConductivityModel:
    return ConductivityModel(model.n, model.gamma0, [], name="base-reference")


def dtn_pairing(models, probes: ProbeSet, backend: str = "hierarchy",
                cfg: SolveConfig | None = None,
                richardson: bool = False) -> complex:
    """Measurement functional: the m-th derivative flux difference of
    two models paired with the test boundary function.

    `models` is a (model_1, model_2) pair or a single model, compared
    against its own base gamma0 with no derivative tensors.  Models
    must share the base conductivity.
    """
    cfg = cfg or SolveConfig()
    if isinstance(models, ConductivityModel):
        model1, model2 = models, _reference_model(models)
    else:
        model1, model2 = models
    grid = probes.grid
    b1 = model1.base_field(grid, probes.rho, "omega").values
    b2 = model2.base_field(grid, probes.rho, "omega").values
    if np.max(np.abs(b1 - b2)) > 1e-10 * np.max(np.abs(b1)):
        raise ValueError("pairing requires a shared base conductivity")
    if backend == "hierarchy":
        flux1 = hierarchy_dtn_flux(model1, probes, cfg=cfg)
        flux2 = hierarchy_dtn_flux(model2, probes, cfg=cfg)
    elif backend == "fd":
        flux1 = mixed_dtn_fd(model1, probes, cfg, richardson=richardson)
        flux2 = mixed_dtn_fd(model2, probes, cfg, richardson=richardson)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    return quad_boundary(flux1 - flux2, probes.f_test)
