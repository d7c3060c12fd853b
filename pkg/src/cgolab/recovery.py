"""Tensor recovery from boundary data via ray-localized probing.

The integral identity of the linearization bridge is tested against
CGO probe patterns whose amplitude products concentrate near a ray;
a Fourier inversion in the amplitude frequency yields the smoothed
contraction profile along the ray, stages eliminate the mixed term
that blocks direct inversion for rank >= 3, and polarization linear
algebra assembles the full symmetric tensor pointwise.  Zero-slot
components (the ones coupling to solution values rather than
gradients) come from constant-probe reductions probed with Calderon
exponential pairs.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .cgo import CgoProbe, CgoSolution, ExpField, cgo_solve
from .conductivity import ConductivityModel, SymTensorExpr
from .expressions import Expr, parse_expr
from .fields import BoundaryFunction, Grid, ScalarField
from .forward import SolveConfig, grad_omega, solve_linear
from .linearize import ProbeSet, dtn_pairing
from .tensors import (AdmissiblePair, SymTensor, make_admissible_pair,
                      reconstruct_from_contractions, sym_indices)

__all__ = [
    "MeasurementOracle", "RaySample", "RecoveryPlan",
    "identity_eval_interior", "ray_functional", "ray_invert",
    "run_induction", "recover_tensor", "stage_pattern",
    "leading_coefficients", "transverse_normalization",
    "calderon_pair", "basis_pairs", "richardson_extrapolate",
    "SupportEscapesOmega", "StageInconsistent", "NyquistViolated",
]


class SupportEscapesOmega(ValueError):
    pass


class StageInconsistent(RuntimeError):
    pass


class NyquistViolated(ValueError):
    pass


# -- probe patterns and their leading coefficients ---------------------------

def stage_pattern(m: int, k: int):
    """Symbolic probe pattern for tensor rank m at stage k.

    Returns a list of (kind, scale) entries for solutions u_1..u_{m+2}:
    kind 'z' rides zeta, 'zt' rides zeta_tilde, 'aux' is a plain real
    solution.  Stage k = m-1 is the seed (no aux); stages m-2..1 carry
    m-k-1 aux factors.
    """
    if not 1 <= k <= m - 1:
        raise ValueError("stage k must lie in 1..m-1")
    pattern = [("z", 1.0)] * k + [("z", -float(k))] + [("zt", 1.0)]
    pattern += [("aux", 1.0)] * (m - k - 1)
    pattern += [("zt", -1.0)]
    if len(pattern) != m + 2:
        raise AssertionError("pattern length mismatch")
    return pattern


def leading_coefficients(m: int, k: int):
    """Coefficients of the leading-order contraction signatures.

    Enumerates all (m+1)! assignments of u_1..u_{m+1} to the tensor
    slots and the gradient position (u_{m+2} is fixed in the closing
    dot).  Each CGO factor contributes its scaled direction vector;
    aux factors contribute a symbolic gradient 'g'.  Terms with the
    closing dot zt.zt drop (null vector).  Returns a dict keyed by
    (n_z, n_zt, n_g, dot) -> coefficient, where dot is 'z.zt' or
    'g.zt' and the (zeta . zeta_tilde) value is kept symbolic.
    """
    pattern = stage_pattern(m, k)
    movable = pattern[:-1]
    closing_scale = pattern[-1][1]           # -1 on zeta_tilde
    out: dict = {}
    for perm in itertools.permutations(range(m + 1)):
        slots = [movable[i] for i in perm[:m]]
        grad_kind, grad_scale = movable[perm[m]]
        if grad_kind == "zt":
            continue                          # zt . zt = 0
        coeff = 1.0
        n_z = n_zt = n_g = 0
        for kind, scale in slots:
            coeff *= scale
            if kind == "z":
                n_z += 1
            elif kind == "zt":
                n_zt += 1
            else:
                n_g += 1
        coeff *= grad_scale * closing_scale
        dot = "z.zt" if grad_kind == "z" else "g.zt"
        key = (n_z, n_zt, n_g, dot)
        out[key] = out.get(key, 0.0) + coeff
    return {k2: v for k2, v in out.items() if v != 0.0}


def stage_constants(m: int, k: int):
    """(c, d): c multiplies (zeta.zeta_tilde) x the target contraction
    T(zeta^k, zt, g^{m-k-1}); d multiplies T(zeta^{k+1}, zt, g^{m-k-2})
    (grad u . zt).  d = 0 at the seed stage."""
    coeffs = leading_coefficients(m, k)
    c = coeffs.get((k, 1, m - k - 1, "z.zt"), 0.0)
    d = coeffs.get((k + 1, 1, m - k - 2, "g.zt"), 0.0)
    return c, d


# -- slot data and the permutation-sum identity -------------------------------

class PointField:
    """Factored solution exp(w.x) phi(x) given only by a point evaluator
    (phi, grad phi); avoids materializing full-grid arrays when probes
    are consumed through adapted quadratures or boundary traces."""

    def __init__(self, grid: Grid, exponent, evaluator):
        self.grid = grid
        self.exponent = np.asarray(exponent, dtype=complex)
        self.point_evaluator = evaluator

    def trace(self) -> BoundaryFunction:
        coords = self.grid.coords("omega")
        phi, _ = self.point_evaluator(coords)
        wx = np.tensordot(self.exponent, coords, axes=(0, 0))
        if float(np.max(np.abs(wx.real))) > 500.0:
            raise ValueError("trace would overflow; lower lambda")
        return BoundaryFunction(self.grid, np.exp(wx) * phi)


@dataclass
class _SlotData:
    """One solution prepared at quadrature points: lam carries the
    (n+1) components of (u, grad u) without the exponential factor,
    grad the plain gradient components, expw the growth vector."""
    lam: np.ndarray
    grad: np.ndarray
    expw: np.ndarray


def _slot_from_scalar(field: ScalarField, points=None) -> _SlotData:
    f = field.restrict_omega()
    g = grad_omega(f)
    n = f.grid.n
    if points is None:
        lam = np.concatenate([f.values[None], g.values], axis=0)
        return _SlotData(lam, g.values, np.zeros(n, dtype=complex))
    axes = [f.grid.omega_axis] * n
    shape = points.shape[1:]
    pts = points.reshape(n, -1).T
    vals = RegularGridInterpolator(axes, f.values, method="cubic")(pts)
    gvals = [RegularGridInterpolator(axes, g.values[ax], method="cubic")(pts)
             for ax in range(n)]
    lam = np.concatenate([vals[None], np.stack(gvals)], axis=0)
    lam = lam.reshape((n + 1,) + shape)
    return _SlotData(lam, lam[1:], np.zeros(n, dtype=complex))


def _slot_from_exp(field: ExpField, points=None, evaluator=None) -> _SlotData:
    n = field.grid.n
    if points is None:
        sl = field.grid.omega_slices
        phi = field.phi[sl]
        grad_parts = [field.exponent[ax] * phi + field.phi_grad[ax][sl]
                      for ax in range(n)]
        lam = np.concatenate([phi[None], np.stack(grad_parts)], axis=0)
        return _SlotData(lam, np.stack(grad_parts), field.exponent.copy())
    if evaluator is None:
        raise ValueError("off-grid evaluation needs a field evaluator")
    phi, phi_grad = evaluator(points)
    grad_parts = [field.exponent[ax] * phi + phi_grad[ax] for ax in range(n)]
    lam = np.concatenate([phi[None], np.stack(grad_parts)], axis=0)
    return _SlotData(lam, np.stack(grad_parts), field.exponent.copy())


def _slot_from_point_field(field: PointField, points,
                           leading: bool = False) -> _SlotData:
    n = field.grid.n
    if points is None:
        points = field.grid.coords("omega")
    phi, phi_grad = field.point_evaluator(points)
    if leading:
        # the lambda -> infinity symbol: gradients ride the growth
        # vector only, the value slot drops out of the normalized limit
        grad_parts = [field.exponent[ax] * phi for ax in range(n)]
        lam = np.concatenate([np.zeros_like(phi)[None], np.stack(grad_parts)],
                             axis=0)
        return _SlotData(lam, np.stack(grad_parts), field.exponent.copy())
    grad_parts = [field.exponent[ax] * phi + phi_grad[ax] for ax in range(n)]
    lam = np.concatenate([phi[None], np.stack(grad_parts)], axis=0)
    return _SlotData(lam, np.stack(grad_parts), field.exponent.copy())


def _prepare_slots(fields, points=None, evaluators=None, leading=False):
    out = []
    for i, f in enumerate(fields):
        if isinstance(f, PointField):
            out.append(_slot_from_point_field(f, points, leading=leading))
        elif isinstance(f, ExpField):
            ev = None if evaluators is None else evaluators[i]
            out.append(_slot_from_exp(f, points, ev))
        elif isinstance(f, ScalarField):
            out.append(_slot_from_scalar(f, points))
        elif isinstance(f, _SlotData):
            out.append(f)
        else:
            raise TypeError(f"cannot use {type(f).__name__} as a solution")
    return out


def _tensor_entries_at(T, coords):
    """{index: coefficient array} for a SymTensorExpr / SymTensor."""
    if isinstance(T, SymTensorExpr):
        return {idx: expr(coords).astype(complex)
                for idx, expr in T.entries.items()}
    if isinstance(T, SymTensor):
        shape = coords.shape[1:]
        return {idx: np.full(shape, T.coeffs[i], dtype=complex)
                for i, idx in enumerate(T.indices) if T.coeffs[i] != 0}
    raise TypeError("T must be a SymTensorExpr or SymTensor")


def _contract_slots(entries, slot_datas):
    """Pointwise T((u_1,grad u_1), ..., (u_r, grad u_r)) over the
    distinct permutations of each stored index."""
    first = slot_datas[0].lam[0]
    out = np.zeros(first.shape, dtype=complex)
    for idx, C in entries.items():
        for perm in sorted(set(itertools.permutations(idx))):
            term = C.copy()
            for slot, j in enumerate(perm):
                term = term * slot_datas[slot].lam[j]
            out += term
    return out


def identity_eval_interior(T, gamma0, fields, grid: Grid,
                           quadrature=None, leading: bool = False) -> complex:
    """The full permutation-sum integral identity evaluated as a value.

    T is a rank-m tensor (expression-valued or constant) over n+1
    slots; fields supplies the m+2 solutions (u_{m+2} closes the
    gradient dot and is never permuted).  With quadrature=None the
    integral is the Omega trapezoid on the grid; otherwise quadrature
    must provide points (n, ...) and weights, and every ExpField needs
    an off-grid evaluator.

    leading=True replaces every factored probe by its large-lambda
    symbol (growth vectors only): the ray-localized limit functional
    whose kernels the inversion divides out exactly.  Plain fields
    (constants, aux solutions) keep their full slot data.
    """
    m = len(fields) - 2
    if m < 0:
        raise ValueError("need at least two solutions")
    if quadrature is None:
        points = None
        coords = grid.coords("omega")
        w1 = grid.trapezoid_weights_1d()
        weights = w1
        evaluators = None
    else:
        points = quadrature.points
        coords = points
        weights = quadrature.weights
        evaluators = quadrature.evaluators(fields)
    slots = _prepare_slots(fields, points,
                           evaluators if quadrature is not None else None,
                           leading=leading)
    entries = _tensor_entries_at(T, coords)
    total_w = sum(s.expw for s in slots)
    if float(np.max(np.abs(np.real(total_w)))) > 1e-9:
        from .cgo import ExponentBlowup
        raise ExponentBlowup("pattern exponents do not cancel")
    phase = np.exp(1j * np.tensordot(np.imag(total_w), coords, axes=(0, 0)))
    closing = slots[m + 1]
    acc = np.zeros(phase.shape, dtype=complex)
    for perm in itertools.permutations(range(m + 1)):
        tslots = [slots[i] for i in perm[:m]]
        gslot = slots[perm[m]]
        dot = np.sum(gslot.grad * closing.grad, axis=0)
        if m == 0:
            acc += dot
        else:
            acc += _contract_slots(entries, tslots) * dot
    integrand = acc * phase
    if quadrature is None:
        out = integrand
        for ax in range(grid.n - 1, -1, -1):
            out = np.tensordot(out, weights, axes=([ax], [0]))
        return complex(out)
    return complex(np.sum(integrand * weights))


# -- measurement oracle --------------------------------------------------------

def field_trace(f, grid: Grid) -> BoundaryFunction:
    """Boundary values of a solution on the Omega surface."""
    if isinstance(f, BoundaryFunction):
        return f
    if isinstance(f, PointField):
        return f.trace()
    if isinstance(f, ScalarField):
        return BoundaryFunction(grid, f.restrict_omega().values)
    if isinstance(f, ExpField):
        coords = grid.coords("omega")
        wx = np.tensordot(f.exponent, coords, axes=(0, 0))
        if float(np.max(np.abs(wx.real))) > 500.0:
            raise ValueError("trace would overflow; lower lambda")
        sl = grid.omega_slices
        return BoundaryFunction(grid, np.exp(wx) * f.phi[sl])
    raise TypeError(f"cannot trace {type(f).__name__}")


class MeasurementOracle:
    """Evaluator of the m-th order pairing for a given probe pattern.

    backend 'interior' integrates the identity directly against a known
    tensor (ground truth); 'hierarchy' and 'fd' measure the boundary
    pairing of a model pair and rescale by (m_lin - 1)! so all backends
    return the same identity value.
    """

    def __init__(self, backend: str, grid: Grid, gamma0,
                 truth=None, models=None, cfg: SolveConfig | None = None):
        if backend not in ("interior", "hierarchy", "fd"):
            raise ValueError(f"unknown backend {backend!r}")
        if backend == "interior" and truth is None:
            raise ValueError("interior backend needs the ground-truth tensor")
        if backend in ("hierarchy", "fd") and models is None:
            raise ValueError("boundary backends need the model (pair)")
        self.backend = backend
        self.grid = grid
        self.gamma0 = parse_expr(gamma0) if isinstance(gamma0, str) else gamma0
        self.truth = truth
        self.models = models
        self.cfg = cfg or SolveConfig()
        self.cache: dict = {}

    def measure(self, fields, quadrature=None, m_rank: int | None = None,
                leading: bool = False) -> complex:
        """Identity value for the m+2 solutions in `fields`."""
        if m_rank is None:
            m_rank = len(fields) - 2
        if self.backend == "interior":
            return identity_eval_interior(self.truth, self.gamma0, fields,
                                          self.grid, quadrature,
                                          leading=leading)
        traces = [field_trace(f, self.grid) for f in fields]
        m_lin = m_rank + 1
        probes = ProbeSet(traces[:m_lin], traces[m_lin], rho=0.0)
        val = dtn_pairing(self.models, probes,
                          backend="hierarchy" if self.backend == "hierarchy" else "fd",
                          cfg=self.cfg)
        return val * math.factorial(m_lin - 1)


# -- probe-adapted quadrature ---------------------------------------------------

class RayQuadrature:
    """Tensor-product quadrature adapted to a basis-aligned probe pair:
    one axis runs along the ray through p, the two transverse axes
    resolve the cutoff kernel at sub-delta resolution.  Points outside
    Omega carry zero weight (the functional integrates over Omega)."""

    def __init__(self, grid: Grid, p, pair: AdmissiblePair, delta: float,
                 t_points: int = 96, y_points: int = 33, pad: float = 1.15):
        d = pair.direction
        axis_dir = int(np.argmax(np.abs(d)))
        if abs(abs(d[axis_dir]) - 1.0) > 1e-12:
            raise ValueError("adapted quadrature needs a basis-aligned ray")
        self.grid = grid
        self.p = np.asarray(p, dtype=float)
        n = grid.n
        a = grid.a
        axes_pts = []
        axes_wts = []
        for ax in range(n):
            if ax == axis_dir:
                lo, hi = -a, a
                pts = np.linspace(lo, hi, t_points)
            else:
                half = delta * pad
                lo = max(-a, self.p[ax] - half)
                hi = min(a, self.p[ax] + half)
                pts = np.linspace(lo, hi, y_points)
            w = np.full(pts.size, pts[1] - pts[0])
            w[0] *= 0.5
            w[-1] *= 0.5
            axes_pts.append(pts)
            axes_wts.append(w)
        self.axes_pts = axes_pts
        mesh = np.meshgrid(*axes_pts, indexing="ij")
        self.points = np.stack(mesh)
        wmesh = np.meshgrid(*axes_wts, indexing="ij")
        self.weights = np.prod(np.stack(wmesh), axis=0)
        self.axis_dir = axis_dir
        self.t_values = (axes_pts[axis_dir] - self.p[axis_dir]) * np.sign(d[axis_dir])

    def evaluators(self, fields):
        evs = []
        for f in fields:
            if isinstance(f, ExpField):
                ev = getattr(f, "point_evaluator", None)
                if ev is None:
                    raise ValueError("ExpField lacks an off-grid evaluator")
                evs.append(ev)
            else:
                evs.append(None)  # PointField / ScalarField handle themselves
        return evs


# -- CGO solution wrappers -------------------------------------------------------

def _cgo_point_evaluator(gamma0: Expr, probe: CgoProbe, grid: Grid,
                         sol: CgoSolution | None = None):
    """(phi, grad phi) evaluator from closed forms; with a spectral
    solution attached, its lattice remainder is included via the
    truncated series."""
    from .cgo import _eval_lattice_series, _eval_lattice_series_grad
    amp = probe.amplitude_form()
    n = grid.n
    dg_exprs = [gamma0.diff(ax) for ax in range(n)]

    def evaluator(points):
        g0 = gamma0(points)
        root = np.sqrt(g0)
        a_vals = amp.eval(points)
        a_grad = amp.grad(points)
        if sol is not None:
            pts_rot = np.tensordot(sol.rotation, points, axes=(1, 0))
            r_vals = _eval_lattice_series(grid, sol.r_rot.values, pts_rot)
            g_rot = _eval_lattice_series_grad(grid, sol.r_rot.values, pts_rot)
            r_grad = np.tensordot(sol.rotation.T, g_rot, axes=(1, 0))
        else:
            r_vals, r_grad = 0.0, 0.0
        phi = (a_vals + r_vals) / root
        droot = np.stack([e(points) for e in dg_exprs]) / (2 * root)
        phi_grad = (a_grad + r_grad) / root - phi * droot / root
        return phi, phi_grad

    return evaluator


def cgo_point_field(gamma0: Expr, probe: CgoProbe, grid: Grid,
                    include_remainder: bool = False) -> PointField:
    """Factored probe solution as a point-evaluated field.  With
    include_remainder the conjugated equation is solved spectrally and
    the remainder rides along; otherwise the field carries the
    leading-order amplitude only."""
    sol = cgo_solve(gamma0, probe, grid) if include_remainder else None
    return PointField(grid, probe.exponent,
                      _cgo_point_evaluator(gamma0, probe, grid, sol))


def build_pattern_fields(gamma0: Expr, pair: AdmissiblePair, m: int, k: int,
                         p, sigma: float, delta: float, lam: float,
                         grid: Grid, aux: list,
                         include_remainder: bool = False):
    """CGO solutions (plus aux) realizing the stage pattern."""
    pattern = stage_pattern(m, k)
    fields = []
    aux_iter = iter(aux)
    cache: dict = {}
    for kind, scale in pattern:
        if kind == "aux":
            fields.append(next(aux_iter))
            continue
        zeta = pair.zeta if kind == "z" else pair.zeta_tilde
        key = (kind, float(scale))
        if key not in cache:
            probe = CgoProbe(zeta, lam=lam, p=np.asarray(p, dtype=float),
                             sigma=sigma, delta=delta, scale=scale)
            cache[key] = cgo_point_field(gamma0, probe, grid,
                                         include_remainder=include_remainder)
        fields.append(cache[key])
    return fields


# -- ray functional, normalization, inversion ------------------------------------

@dataclass
class RaySample:
    p: np.ndarray
    direction: np.ndarray
    sigma_grid: np.ndarray
    J: np.ndarray                 # lambda-normalized identity values
    freq_mult: int
    delta: float
    lam: float
    pair: AdmissiblePair
    stage_k: int
    m: int


def transverse_normalization(pair: AdmissiblePair, m: int, k: int,
                             delta: float, sigma: float,
                             resolution: int = 121) -> complex:
    """Transverse kernel mass C(delta, chi, pair, sigma): the 2D
    integral over the plane normal to the ray of
    chi^{k+1}(w.y/delta) chi_tilde^2(wt.y/delta) e^{-sigma beta.y},
    beta = (k+1) Im zeta + 2 Im zeta_tilde."""
    from .cgo import chi as chi_fn
    from .tensors import cutoff_frame as frame_fn
    d = pair.direction
    n = d.size
    if n != 3:
        raise NotImplementedError("transverse normalization implemented for n=3")
    e1 = pair.zeta.imag / np.linalg.norm(pair.zeta.imag)
    e2 = np.cross(d, e1)
    omega = frame_fn(pair.zeta)[0]
    omega_t = frame_fn(pair.zeta_tilde)[0]
    beta = (k + 1) * pair.zeta.imag + 2 * pair.zeta_tilde.imag
    half = 1.6 * delta
    y = np.linspace(-half, half, resolution)
    dy = y[1] - y[0]
    Y1, Y2 = np.meshgrid(y, y, indexing="ij")
    pts = Y1[None] * e1.reshape(3, 1, 1) + Y2[None] * e2.reshape(3, 1, 1)
    t1 = np.tensordot(omega, pts, axes=(0, 0)) / delta
    t2 = np.tensordot(omega_t, pts, axes=(0, 0)) / delta
    expo = np.exp(-sigma * np.tensordot(beta, pts, axes=(0, 0)))
    kern = chi_fn(t1) ** (k + 1) * chi_fn(t2) ** 2 * expo
    return complex(np.sum(kern) * dy * dy)


def _check_support(grid: Grid, p, delta: float, margin: float = 0.02):
    p = np.asarray(p, dtype=float)
    needed = (np.sqrt(grid.n) + 1.0) * delta + margin
    if np.any(grid.a - np.abs(p) < needed):
        raise SupportEscapesOmega(
            f"point {p} closer than {needed:.3f} to the boundary")


def ray_functional(oracle: MeasurementOracle, p, pair: AdmissiblePair,
                   m: int, k: int, sigma_grid, lam: float, delta: float,
                   aux: list | None = None,
                   include_remainder: bool = False,
                   quadrature: str = "auto",
                   mode: str = "limit") -> RaySample:
    """J(sigma) for the stage pattern, normalized by lambda^{k+3}.

    With the interior backend the identity is integrated on a
    ray-adapted quadrature; mode="limit" (recovery grade) uses the
    large-lambda symbols of the probes so the kernels divided out by
    the inversion are exact, mode="full" keeps the finite-lambda
    fields (for decay diagnostics; at desk scale lambda*delta is far
    below the cutoff-gradient scale, so "full" values carry O(1)
    contamination that only the sweep extrapolation can reduce).
    Boundary backends always measure the full physics of the traces.
    """
    grid = oracle.grid
    _check_support(grid, p, delta)
    aux = aux or []
    if len(aux) != m - k - 1:
        raise ValueError(f"stage k={k} needs {m - k - 1} aux solutions")
    sigma_grid = np.asarray(sigma_grid, dtype=float)
    if np.max(np.abs(sigma_grid)) * delta > 0.5 + 1e-12:
        raise ValueError("sigma grid violates the |sigma| delta <= 1/2 guard")
    if not np.allclose(sigma_grid, -sigma_grid[::-1]):
        raise ValueError("sigma grid must be symmetric about zero")
    use_adapted = (oracle.backend == "interior" and quadrature != "grid")
    leading = (oracle.backend == "interior" and mode == "limit")
    J = np.zeros(sigma_grid.size, dtype=complex)
    quad = RayQuadrature(grid, p, pair, delta) if use_adapted else None
    for i, sigma in enumerate(sigma_grid):
        fields = build_pattern_fields(
            oracle.gamma0, pair, m, k, p, float(sigma), delta, lam, grid, aux,
            include_remainder=include_remainder)
        val = oracle.measure(fields, quadrature=quad, m_rank=m,
                             leading=leading)
        J[i] = val / lam ** (k + 3)
    return RaySample(p=np.asarray(p, dtype=float), direction=pair.direction,
                     sigma_grid=sigma_grid, J=J, freq_mult=k + 3, delta=delta,
                     lam=lam, pair=pair, stage_k=k, m=m)


def richardson_extrapolate(lams, values):
    """Fit values(lam) = v_inf + c1/lam (+ c2/lam^2) and return v_inf."""
    lams = np.asarray(lams, dtype=float)
    values = np.asarray(values)
    if lams.size == 1:
        return values[0]
    cols = [np.ones_like(lams), 1.0 / lams]
    if lams.size >= 3:
        cols.append(1.0 / lams ** 2)
    A = np.stack(cols, axis=1)
    coef, *_ = np.linalg.lstsq(A, values, rcond=None)
    return coef[0]


def ray_invert(sample: RaySample, gamma0: Expr, t_grid,
               aux_correction=None) -> np.ndarray:
    """Contraction profile along the ray from J(sigma).

    Divides each sample by the per-sigma transverse kernel mass and the
    pattern constant, inverts the Fourier transform at the pattern's
    frequency multiplier, and removes the gamma0 weight along the ray.
    `aux_correction(t)` divides out known aux-gradient factors.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    M = sample.freq_mult
    sig = sample.sigma_grid
    dsig = sig[1] - sig[0]
    period = 2 * np.pi / (M * dsig)
    chord = t_grid.max() - t_grid.min()
    if period < chord:
        raise NyquistViolated(
            f"sigma spacing {dsig:.3f} aliases t beyond {period:.2f} < {chord:.2f}")
    c, _ = stage_constants(sample.m, sample.stage_k)
    zdot = sample.pair.dot
    Cs = np.array([transverse_normalization(sample.pair, sample.m,
                                            sample.stage_k, sample.delta, s)
                   for s in sig])
    vals = sample.J / (c * zdot * Cs)
    w = np.full(sig.size, dsig)
    w[0] *= 0.5
    w[-1] *= 0.5
    kernel = np.exp(-1j * M * np.outer(t_grid, sig))
    prof = kernel @ (w * vals)
    prof = prof * M / (2 * np.pi)
    ray_pts = sample.p.reshape(-1, 1) + np.outer(sample.direction, t_grid)
    g0 = gamma0(ray_pts)
    prof = prof * g0 ** ((sample.stage_k + 3) / 2.0)
    if aux_correction is not None:
        prof = prof / aux_correction(t_grid)
    return prof


# -- plans, induction, assembly ---------------------------------------------------

def basis_pairs(n: int = 3):
    """The admissible pairs built on ordered standard-basis triples."""
    E = np.eye(n)
    pairs = []
    for i in range(n):
        for j, k in itertools.permutations([a for a in range(n) if a != i], 2):
            for s in (1.0, -1.0):
                pairs.append(make_admissible_pair(E[i], E[j], s * E[k]))
    return pairs


def calderon_pair(kvec, scale: float, n: int = 3):
    """Null exponential pair zeta1 = eta + i(k+l), zeta2 = -eta + i(k-l)
    with k.l = 0, eta orthogonal to both, |eta|^2 = |k|^2 + |l|^2; the
    product of the two exponentials oscillates as exp(2i k.x)."""
    kvec = np.asarray(kvec, dtype=float)
    if np.linalg.norm(kvec) >= scale:
        raise ValueError("needs scale > |k|")
    # deterministic orthonormal completion
    seed = np.zeros(n)
    seed[int(np.argmin(np.abs(kvec)))] = 1.0
    if np.linalg.norm(kvec) < 1e-14:
        eta_hat = np.eye(n)[0]
        l_hat = np.eye(n)[1]
    else:
        khat = kvec / np.linalg.norm(kvec)
        v = seed - (seed @ khat) * khat
        eta_hat = v / np.linalg.norm(v)
        l_hat = np.cross(khat, eta_hat) if n == 3 else None
        if l_hat is None:
            raise NotImplementedError("calderon pairs need n = 3")
    lnorm = np.sqrt(scale ** 2 - kvec @ kvec)
    eta = scale * eta_hat
    l = lnorm * l_hat
    z1 = eta + 1j * (kvec + l)
    z2 = -eta + 1j * (kvec - l)
    return z1, z2


@dataclass
class RecoveryPlan:
    """Everything a recovery run needs; defaults target n = 3."""
    m: int
    points: list
    delta: float = 0.3
    lam_sweep: tuple = (6.0, 9.0, 13.5)
    sigma_count: int = 13
    mode_extent: int = 1          # Fourier modes |m|_inf <= this
    calderon_scale: float = 10.0
    aux_data: tuple = ("x1", "x2", "x3")
    expect_null_stages: tuple = ()
    null_tol: float = 1e-3
    include_remainder: bool = False
    mode: str = "limit"          # interior-backend probe treatment

    def sigma_grid(self):
        smax = 0.5 / self.delta * 0.98
        return np.linspace(-smax, smax, self.sigma_count)

    def pairs(self, n: int = 3):
        return basis_pairs(n)


def make_aux_solutions(gamma0_field: ScalarField, plan: RecoveryPlan,
                       cfg: SolveConfig):
    grid = gamma0_field.grid
    out = []
    for text in plan.aux_data:
        expr = parse_expr(text)
        f = BoundaryFunction.from_callable(grid, lambda x, e=expr: e(x))
        out.append(solve_linear(gamma0_field, f, cfg))
    return out


def _aux_gradient_at(aux_field: ScalarField, pts: np.ndarray) -> np.ndarray:
    grid = aux_field.grid
    g = grad_omega(aux_field)
    axes = [grid.omega_axis] * grid.n
    cols = [RegularGridInterpolator(axes, g.values[ax], method="cubic")(pts.T)
            for ax in range(grid.n)]
    return np.stack(cols)


def run_induction(oracle: MeasurementOracle, plan: RecoveryPlan,
                  aux_solutions=None, cfg: SolveConfig | None = None):
    """Stage recursion: per point and pair, recover the contraction
    profiles T(zeta^s, zt, grad u^{m-s-1}) for s = m-1 .. 1, using each
    stage's profile to strip the blocking term from the next.

    Returns {(point_index, pair_index): {s: {aux_key: value_at_0}}}
    plus the profiles for diagnostics.
    """
    cfg = cfg or SolveConfig()
    m = plan.m
    grid = oracle.grid
    gamma0 = oracle.gamma0
    sigma_grid = plan.sigma_grid()
    pairs = plan.pairs(grid.n)
    if aux_solutions is None:
        g0f = ScalarField(grid, gamma0(grid.coords("omega")).astype(complex),
                          "omega")
        aux_solutions = make_aux_solutions(g0f, plan, cfg) if m >= 3 else []
    database: dict = {}
    profiles: dict = {}
    t_grid = np.linspace(-grid.a * 0.9, grid.a * 0.9, 65)
    for pi, p in enumerate(plan.points):
        for qi, pair in enumerate(pairs):
            entry: dict = {}
            prof_entry: dict = {}
            # seed stage s = m-1: no aux factors
            prof_seed = _stage_profile(oracle, plan, p, pair, m, m - 1, [],
                                       sigma_grid, t_grid, gamma0, None)
            scale0 = max(np.max(np.abs(prof_seed)), 1e-30)
            if m - 1 in plan.expect_null_stages and \
                    np.max(np.abs(prof_seed)) > 10 * plan.null_tol:
                raise StageInconsistent(
                    f"stage {m - 1} expected null, profile reaches "
                    f"{np.max(np.abs(prof_seed)):.3e}")
            entry[m - 1] = {(): _value_at(t_grid, prof_seed, 0.0)}
            prof_entry[m - 1] = {(): prof_seed}
            prev_profiles = {(): prof_seed}
            for k in range(m - 2, 0, -1):
                cur_vals: dict = {}
                cur_profs: dict = {}
                for combo in itertools.combinations(range(len(aux_solutions)),
                                                    m - k - 1):
                    aux = [aux_solutions[i] for i in combo]
                    # the blocking term carries one fewer aux factor
                    prev = prev_profiles.get(combo[:-1])
                    prof = _stage_profile(oracle, plan, p, pair, m, k, aux,
                                          sigma_grid, t_grid, gamma0, prev,
                                          last_aux=aux[-1] if aux else None)
                    cur_vals[combo] = _value_at(t_grid, prof, 0.0)
                    cur_profs[combo] = prof
                entry[k] = cur_vals
                prof_entry[k] = cur_profs
                prev_profiles = cur_profs
            database[(pi, qi)] = entry
            profiles[(pi, qi)] = prof_entry
    return database, profiles, aux_solutions


def _value_at(t_grid, profile, t0):
    return complex(np.interp(t0, t_grid, profile.real)
                   + 1j * np.interp(t0, t_grid, profile.imag))


def _stage_profile(oracle, plan, p, pair, m, k, aux, sigma_grid, t_grid,
                   gamma0, prev_profile, last_aux=None):
    """Measure J over the lambda sweep, extrapolate, strip the blocking
    term using the previous stage's profile, and invert to t-space."""
    samples = []
    lam_sweep = plan.lam_sweep
    if oracle.backend == "interior" and plan.mode == "limit":
        lam_sweep = plan.lam_sweep[-1:]   # limit values are lambda-free
    for lam in lam_sweep:
        samples.append(ray_functional(
            oracle, p, pair, m, k, sigma_grid, lam, plan.delta, aux=aux,
            include_remainder=plan.include_remainder, mode=plan.mode))
    J = richardson_extrapolate(lam_sweep,
                               np.stack([s.J for s in samples]))
    sample = samples[-1]
    sample = RaySample(p=sample.p, direction=sample.direction,
                       sigma_grid=sample.sigma_grid, J=J,
                       freq_mult=sample.freq_mult, delta=sample.delta,
                       lam=sample.lam, pair=sample.pair,
                       stage_k=sample.stage_k, m=sample.m)
    if prev_profile is not None and k <= m - 2:
        c, d = stage_constants(m, k)
        if abs(d) > 0:
            corr = _blocking_term_transform(sample, gamma0, t_grid,
                                            prev_profile, last_aux, pair, m, k)
            J = J - d * corr
            sample = RaySample(p=sample.p, direction=sample.direction,
                               sigma_grid=sample.sigma_grid, J=J,
                               freq_mult=sample.freq_mult, delta=sample.delta,
                               lam=sample.lam, pair=sample.pair,
                               stage_k=sample.stage_k, m=sample.m)
    return ray_invert(sample, gamma0, t_grid)


def _blocking_term_transform(sample, gamma0, t_grid, prev_profile, last_aux,
                             pair, m, k):
    """Forward sigma-model of the stage's blocking term: the previous
    stage's contraction profile times (grad u . zt), pushed through the
    same kernel mass and frequency multiplier."""
    ray_pts = sample.p.reshape(-1, 1) + np.outer(sample.direction, t_grid)
    g0 = gamma0(ray_pts)
    gvals = _aux_gradient_at(last_aux, ray_pts)
    gdot = np.tensordot(pair.zeta_tilde, gvals, axes=(0, 0))
    profile = prev_profile * gdot * g0 ** (-(k + 3) / 2.0)
    M = sample.freq_mult
    dt = t_grid[1] - t_grid[0]
    out = np.zeros(sample.sigma_grid.size, dtype=complex)
    for i, s in enumerate(sample.sigma_grid):
        Cs = transverse_normalization(pair, m, k, sample.delta, s)
        ft = np.sum(profile * np.exp(1j * M * s * t_grid)) * dt
        out[i] = Cs * ft
    return out


# -- pointwise tensor assembly -----------------------------------------------------

def _mode_set(extent: int, n: int = 3):
    rng = range(-extent, extent + 1)
    return [np.array(mv, dtype=float) for mv in itertools.product(rng, repeat=n)]


def _const_field(grid: Grid) -> ScalarField:
    return ScalarField(grid, np.ones(grid.omega_shape, dtype=complex), "omega")


def calderon_exp_fields(oracle: MeasurementOracle, kappa, scale: float):
    """Amplitude-level factored solutions for a Calderon pair; when the
    traces go through the boundary backends, the discrete solves pick
    up the physically correct remainders automatically."""
    grid = oracle.grid
    z1, z2 = calderon_pair(kappa, scale, grid.n)
    fields = []
    for z in (z1, z2):
        probe = CgoProbe(z, lam=1.0, p=np.zeros(grid.n))
        fields.append(cgo_point_field(oracle.gamma0, probe, grid))
    return fields


def _basis_exprs(extent: int):
    """Real Fourier atoms cos/sin(pi m . x) over |m|_inf <= extent,
    one representative per +-m; these are exactly the frequencies the
    Calderon pairs with kappa = pi m / 2 can reach."""
    from .expressions import Cos, Sin
    out = [parse_expr("1")]
    rng = range(-extent, extent + 1)
    seen = set()
    for mv in itertools.product(rng, repeat=3):
        if all(c == 0 for c in mv):
            continue
        if mv in seen or tuple(-c for c in mv) in seen:
            continue
        seen.add(mv)
        arg = None
        for ax, mcomp in enumerate(mv):
            if mcomp:
                term = parse_expr(f"{np.pi * mcomp:.16g}*x{ax + 1}")
                arg = term if arg is None else arg + term
        out.append(Cos(arg))
        out.append(Sin(arg))
    return out


class _RowBuilder:
    """Least-squares rows for linear tensor inversion: each probe set
    gives one equation; the unknown tensor is parametrized by
    (component, Fourier atom) pairs restricted to `components`."""

    def __init__(self, oracle: MeasurementOracle, m_rank: int,
                 components, basis_exprs, cfg: SolveConfig):
        self.oracle = oracle
        self.m_rank = m_rank
        self.components = list(components)
        self.basis = basis_exprs
        self.cfg = cfg
        self.grid = oracle.grid
        self._v_cache: dict = {}
        self._g0f = ScalarField(
            self.grid, oracle.gamma0(self.grid.coords("omega")).astype(complex),
            "omega")
        self.rows: list = []
        self.data: list = []

    def _discrete(self, f):
        if isinstance(f, ExpField):
            key = id(f)
            if key not in self._v_cache:
                self._v_cache[key] = solve_linear(
                    self._g0f, field_trace(f, self.grid), self.cfg)
            return self._v_cache[key]
        return f

    def row_for(self, fields) -> np.ndarray:
        disc = [self._discrete(f) for f in fields]
        row = np.zeros(len(self.components) * len(self.basis), dtype=complex)
        pos = 0
        for comp in self.components:
            for expr in self.basis:
                T = SymTensorExpr(self.grid.n + 1, self.m_rank, {comp: expr})
                row[pos] = identity_eval_interior(T, self.oracle.gamma0,
                                                  disc, self.grid)
                pos += 1
        return row

    def add(self, fields, weight: float = 1.0):
        self.rows.append(weight * self.row_for(fields))
        self.data.append(weight * self.oracle.measure(fields, m_rank=self.m_rank))

    def add_combination(self, terms):
        """One equation from a linear recombination of probe sets:
        terms = [(coeff, fields), ...]."""
        row = 0.0
        val = 0.0
        for coeff, fields in terms:
            row = row + coeff * self.row_for(fields)
            val = val + coeff * self.oracle.measure(fields, m_rank=self.m_rank)
        self.rows.append(row)
        self.data.append(val)

    def solve(self):
        A = np.array(self.rows)
        b = np.array(self.data)
        A = np.vstack([A.real, A.imag])
        b = np.concatenate([b.real, b.imag])
        coef, *_ = np.linalg.lstsq(A, b, rcond=None)
        return coef

    def evaluate(self, coef, points):
        """Recovered component values at points, {component: array}."""
        pts = np.asarray(points, dtype=float).T  # (n, P)
        out = {}
        pos = 0
        for comp in self.components:
            acc = np.zeros(pts.shape[1])
            for expr in self.basis:
                acc = acc + coef[pos] * expr(pts)
                pos += 1
            out[comp] = acc
        return out


def _polarization_chain_rows(builder: _RowBuilder, w_field, v1, v2):
    """The recombination isolating int (T^0 w + T^j d_j w) grad v1 .
    grad v2 from three oracle calls (the polarization chain realized
    at the functional level)."""
    builder.add_combination([
        (0.5, [w_field, v1, v2]),
        (0.5, [w_field, v2, v1]),
        (-0.5, [v1, v2, w_field]),
    ])


def _real_part_probes(oracle: MeasurementOracle, lam_w: float):
    """Real solutions 2 Re U and -2 Im U for axis-pair growth vectors;
    the recovery rows built on them realize the real-part assembly of
    complex-direction contractions."""
    grid = oracle.grid
    E = np.eye(grid.n)
    out = []
    for i, j in ((0, 1), (1, 2), (2, 0)):
        zeta = E[i] + 1j * E[j]
        probe = CgoProbe(zeta, lam=lam_w, p=np.zeros(grid.n))
        f = cgo_point_field(oracle.gamma0, probe, grid)
        tr = field_trace(f, grid)
        g0f = ScalarField(grid, oracle.gamma0(
            grid.coords("omega")).astype(complex), "omega")
        u = solve_linear(g0f, tr)
        out.append(ScalarField(grid, 2 * u.values.real.astype(complex), "omega"))
        out.append(ScalarField(grid, -2 * u.values.imag.astype(complex), "omega"))
    return out


def recover_rank1(oracle: MeasurementOracle, plan: RecoveryPlan,
                  cfg: SolveConfig | None = None):
    """Rank-1 recovery: the value slot from constant-probe reductions,
    the gradient slots from the polarization-chain rows, both probed
    with Calderon exponential pairs and inverted on the Fourier atoms.

    Returns (tensors_at_points, row_builder) with one SymTensor of
    rank 1 over n+1 slots per plan point.
    """
    cfg = cfg or SolveConfig()
    grid = oracle.grid
    comps = list(sym_indices(grid.n + 1, 1))
    basis = _basis_exprs(plan.mode_extent)
    builder = _RowBuilder(oracle, 1, comps, basis, cfg)
    const = _const_field(grid)
    w_family = _real_part_probes(oracle, lam_w=2.0)
    g0f = ScalarField(grid, oracle.gamma0(
        grid.coords("omega")).astype(complex), "omega")
    aux = make_aux_solutions(g0f, plan, cfg)
    w_family = aux + w_family
    for mvec in _mode_set(plan.mode_extent, grid.n):
        kappa = np.pi * mvec / 2.0
        u1, u2 = calderon_exp_fields(oracle, kappa, plan.calderon_scale)
        builder.add([u1, const, u2])
        for w in w_family:
            _polarization_chain_rows(builder, w, u1, u2)
    coef = builder.solve()
    vals = builder.evaluate(coef, plan.points)
    tensors = []
    for ip in range(len(plan.points)):
        t = SymTensor(grid.n + 1, 1)
        for comp in comps:
            t[comp] = vals[comp][ip]
        tensors.append(t)
    return tensors, builder


def _zero_slot_rank2(oracle: MeasurementOracle, plan: RecoveryPlan,
                     cfg: SolveConfig):
    """(T^{00}, T^{0j}) fields for rank 2 via constant-probe reductions."""
    grid = oracle.grid
    comps = [(0, 0), (0, 1), (0, 2), (0, 3)][:grid.n + 1]
    basis = _basis_exprs(plan.mode_extent)
    builder = _RowBuilder(oracle, 2, comps, basis, cfg)
    const = _const_field(grid)
    g0f = ScalarField(grid, oracle.gamma0(
        grid.coords("omega")).astype(complex), "omega")
    aux = make_aux_solutions(g0f, plan, cfg)
    for mvec in _mode_set(plan.mode_extent, grid.n):
        kappa = np.pi * mvec / 2.0
        u1, u2 = calderon_exp_fields(oracle, kappa, plan.calderon_scale)
        builder.add([u1, const, const, u2])
        for w in aux:
            builder.add([u1, w, const, u2])
    coef = builder.solve()
    return builder, coef


def recover_tensor(oracle: MeasurementOracle, plan: RecoveryPlan,
                   cfg: SolveConfig | None = None):
    """Full rank-m symmetric tensor over n+1 slots at the plan points.

    Zero-slot-bearing components come from constant-probe reductions
    (each constant substitution lowers the effective rank); the pure
    gradient-slot block comes from the ray pipeline: stage induction,
    Fourier inversion at t = 0, and polarization least squares over
    the admissible pairs.
    """
    cfg = cfg or SolveConfig()
    grid = oracle.grid
    n = grid.n
    if plan.m == 1:
        return recover_rank1(oracle, plan, cfg)[0]
    if plan.m not in (2, 3):
        raise ValueError("recovery supports tensor ranks 1..3")
    database, profiles, aux_solutions = run_induction(oracle, plan, cfg=cfg)
    pairs = plan.pairs(n)
    tensors = []
    for ip, p in enumerate(plan.points):
        samples = []
        for qi, pair in enumerate(pairs):
            entry = database[(ip, qi)]
            # seed stage: T(zeta^{m-1}, zt)
            seed_val = entry[plan.m - 1][()]
            samples.append((
                [pair.zeta] * (plan.m - 1) + [pair.zeta_tilde], seed_val))
            for k in sorted(entry):
                if k == plan.m - 1:
                    continue
                for combo, val in entry[k].items():
                    gvecs = []
                    for ai in combo:
                        gp = _aux_gradient_at(aux_solutions[ai],
                                              np.asarray(p, float).reshape(-1, 1))
                        gvecs.append(gp[:, 0])
                    vecs = [pair.zeta] * k + [pair.zeta_tilde] + gvecs
                    samples.append((vecs, val))
        mu_part = reconstruct_from_contractions(samples, n, plan.m, real=True)
        t_full = SymTensor(n + 1, plan.m)
        for idx in sym_indices(n, plan.m):
            t_full[tuple(j + 1 for j in idx)] = mu_part[idx]
        tensors.append(t_full)
    if plan.m == 2:
        builder, coef = _zero_slot_rank2(oracle, plan, cfg)
        vals = builder.evaluate(coef, plan.points)
        for ip in range(len(plan.points)):
            for comp in builder.components:
                tensors[ip][comp] = vals[comp][ip]
    return tensors
