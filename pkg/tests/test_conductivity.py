import itertools
import math

import numpy as np
import pytest

from cgolab.conductivity import (
    ConductivityModel, RadiusExceeded, SymTensorExpr, eval_conductivity,
    gamma_partials, q_potential,
)
from cgolab.expressions import parse_expr
from cgolab.fields import Grid, NonPositiveGamma, ScalarField, grad


@pytest.fixture(scope="module")
def grid():
    return Grid(3, 17, a=1.0)


def naive_gamma(model, coords, lam):
    """Oracle: full d^k sums over dense index tuples."""
    n1 = model.n + 1
    vals = model.gamma0(coords).astype(complex)
    for k, tensor in enumerate(model.taylor, start=1):
        acc = 0.0
        for idx in itertools.product(range(n1), repeat=k):
            c = tensor[idx](coords)
            prod = c.astype(complex)
            for j in idx:
                prod = prod * lam[j]
            acc = acc + prod
        vals = vals + acc / math.factorial(k)
    return vals


def test_q_potential_constant(grid):
    q = q_potential(parse_expr("2.5"), grid)
    assert np.max(np.abs(q.values)) < 1e-14


def test_q_potential_exponential(grid):
    q = q_potential(parse_expr("exp(x1)"), grid)
    assert np.max(np.abs(q.values - 0.25)) < 1e-12


def test_q_potential_polynomial(grid):
    q = q_potential(parse_expr("pow(1 + x1^2, 2)"), grid)
    x1 = grid.coords("Q")[0]
    assert np.max(np.abs(q.values - 2.0 / (1 + x1 ** 2))) < 1e-11


def test_q_potential_scale_invariance(grid):
    g = parse_expr("1 + 0.3*sin(x1)")
    q1 = q_potential(g, grid)
    q2 = q_potential(g * 17.0, grid)
    assert np.max(np.abs(q1.values - q2.values)) < 1e-12


def test_q_potential_callable_fallback_matches_symbolic(grid):
    expr = parse_expr("exp(x1/2) * (1 + 0.1*sin(x2))")
    q_sym = q_potential(expr, grid)
    q_fd = q_potential(lambda c: expr(c), grid)
    assert np.max(np.abs(q_sym.values - q_fd.values)) < 1e-6


def test_q_potential_rejects_nonpositive(grid):
    with pytest.raises(NonPositiveGamma):
        q_potential(parse_expr("x1"), grid)


def test_eval_conductivity_zero_field_returns_gamma0(grid):
    t1 = SymTensorExpr(4, 1, {(0,): "x1"})
    model = ConductivityModel(3, "1 + 0.3*sin(x1)", [t1])
    u = ScalarField.from_callable(grid, lambda x: np.zeros_like(x[0]))
    out = eval_conductivity(model, u, grad(u))
    assert np.allclose(out.values, model.gamma0(grid.coords("Q")))


def test_eval_conductivity_linear_in_u(grid):
    t1 = SymTensorExpr(4, 1, {(0,): "x2"})
    model = ConductivityModel(3, "2", [t1])
    u = ScalarField.from_callable(grid, lambda x: 0.1 * np.sin(x[0]))
    out = eval_conductivity(model, u, grad(u))
    coords = grid.coords("Q")
    expect = 2 + coords[1] * u.values
    assert np.max(np.abs(out.values - expect)) < 1e-13


def test_eval_conductivity_matches_naive_sum(grid):
    rng = np.random.default_rng(9)
    t1 = SymTensorExpr(4, 1)
    t2 = SymTensorExpr(4, 2)
    for idx in t1.indices:
        t1[idx] = rng.standard_normal()
    for idx in t2.indices:
        t2[idx] = rng.standard_normal()
    model = ConductivityModel(3, "1 + 0.2*x1^2", [t1, t2])
    u = ScalarField.from_callable(grid, lambda x: 0.05 * np.cos(x[0]) * x[1])
    gu = grad(u)
    out = eval_conductivity(model, u, gu)
    coords = grid.coords("Q")
    lam = [u.values] + [gu.values[j] for j in range(3)]
    expect = naive_gamma(model, coords, lam)
    assert np.max(np.abs(out.values - expect)) < 1e-13


def test_eval_conductivity_radius_guard(grid):
    model = ConductivityModel(3, "1", [SymTensorExpr(4, 1, {(1,): 1.0})],
                              radius=0.05)
    u = ScalarField.from_callable(grid, lambda x: x[0])
    with pytest.raises(RadiusExceeded):
        eval_conductivity(model, u, grad(u))


def test_gamma_partials_match_finite_differences(grid):
    rng = np.random.default_rng(3)
    t1 = SymTensorExpr(4, 1)
    t2 = SymTensorExpr(4, 2)
    for idx in t1.indices:
        t1[idx] = rng.standard_normal()
    for idx in t2.indices:
        t2[idx] = rng.standard_normal()
    model = ConductivityModel(3, "1.5", [t1, t2])
    u = ScalarField.from_callable(grid, lambda x: 0.03 * np.sin(x[0] + x[1]))
    gu = grad(u)
    parts = gamma_partials(model, u, gu)
    coords = grid.coords("Q")
    lam = [u.values] + [gu.values[j] for j in range(3)]
    eps = 1e-6
    for j in range(4):
        lam_p = [c.copy() for c in lam]
        lam_m = [c.copy() for c in lam]
        lam_p[j] = lam_p[j] + eps
        lam_m[j] = lam_m[j] - eps
        fd = (naive_gamma(model, coords, lam_p)
              - naive_gamma(model, coords, lam_m)) / (2 * eps)
        assert np.max(np.abs(parts[j] - fd)) < 1e-7


def test_recentered_taylor_reproduces_shifted_derivatives(grid):
    rng = np.random.default_rng(5)
    t1 = SymTensorExpr(4, 1)
    t2 = SymTensorExpr(4, 2)
    for idx in t1.indices:
        t1[idx] = rng.standard_normal()
    for idx in t2.indices:
        t2[idx] = rng.standard_normal()
    model = ConductivityModel(3, "2", [t1, t2])
    rho = 0.3
    tilde = model.recentered_taylor(rho)
    # oracle: gamma(rho*e0 + s*v) as a function of s; compare d/ds at 0
    coords = grid.coords("Q")[:, :1, :1, :1]
    v = rng.standard_normal(4)
    lam0 = [np.full(coords.shape[1:], rho)] + [np.zeros(coords.shape[1:])] * 3

    def gamma_of_s(s):
        lam = [lam0[j] + s * v[j] for j in range(4)]
        return naive_gamma(model, coords, lam)

    eps = 1e-5
    d1 = (gamma_of_s(eps) - gamma_of_s(-eps)) / (2 * eps)
    # first recentered tensor contracted with v
    got = 0.0
    for idx, expr in tilde[0].entries.items():
        got = got + expr(coords) * v[idx[0]]
    assert np.max(np.abs(got - d1)) < 1e-8

    d2 = (gamma_of_s(eps) - 2 * gamma_of_s(0.0) + gamma_of_s(-eps)) / eps ** 2
    got2 = 0.0
    from cgolab.tensors import index_multiplicity
    for idx, expr in tilde[1].entries.items():
        got2 = got2 + expr(coords) * index_multiplicity(idx) * v[idx[0]] * v[idx[1]]
    assert np.max(np.abs(got2 - d2)) < 1e-4


def test_base_field_includes_rho_terms(grid):
    t1 = SymTensorExpr(4, 1, {(0,): "1"})
    model = ConductivityModel(3, "2", [t1])
    base = model.base_field(grid, rho=0.25)
    assert np.allclose(base.values, 2.25)
