import numpy as np
import pytest

from cgolab.expressions import ExprParseError, laplacian, parse_expr, var


def pts(*cols):
    return np.array(cols)


def test_parse_and_eval_basic():
    e = parse_expr("1 + 0.3*sin(x1)")
    x = np.linspace(-3, 3, 11)
    coords = np.stack([x])
    assert np.allclose(e(coords), 1 + 0.3 * np.sin(x))


def test_parse_polynomial_and_pow():
    e = parse_expr("(1 + 0.2*x1^2) * exp(x2/2)")
    coords = pts([0.5, -1.0], [1.0, 2.0])
    expect = (1 + 0.2 * np.array([0.5, -1.0]) ** 2) * np.exp(np.array([1.0, 2.0]) / 2)
    assert np.allclose(e(coords), expect)


def test_parse_pow_function_and_sqrt():
    e = parse_expr("pow(x1, 3) - sqrt(x2)")
    coords = pts([2.0], [4.0])
    assert np.allclose(e(coords), [8.0 - 2.0])


def test_operator_precedence():
    e = parse_expr("2 + 3*x1^2")
    assert np.allclose(e(pts([2.0])), [14.0])


@pytest.mark.parametrize("text", ["x1 +", "sin(x1", "pow(x1, x2)", "y1", "1..2"])
def test_parse_errors_carry_position(text):
    with pytest.raises(ExprParseError) as err:
        parse_expr(text)
    assert "position" in str(err.value)


@pytest.mark.parametrize("text", [
    "exp(x1)*sin(x2) + cos(x1*x2)",
    "1/(1 + x1^2)",
    "pow(1 + 0.2*x1^2, 2)",
    "x1*x2*x3 - exp(-x3)",
])
def test_diff_matches_finite_differences(text):
    e = parse_expr(text)
    rng = np.random.default_rng(7)
    coords = rng.uniform(0.2, 0.9, size=(3, 5))
    h = 1e-6
    for axis in range(3):
        shifted_p = coords.copy()
        shifted_m = coords.copy()
        shifted_p[axis] += h
        shifted_m[axis] -= h
        fd = (e(shifted_p) - e(shifted_m)) / (2 * h)
        assert np.allclose(e.diff(axis)(coords), fd, rtol=1e-6, atol=1e-7)


def test_laplacian_of_quadratic_is_constant():
    e = parse_expr("x1^2 - x2^2 + 3*x3^2")
    lap = laplacian(e, 3)
    coords = np.random.default_rng(0).normal(size=(3, 4))
    assert np.allclose(lap(coords), 6.0)


def test_roundtrip_repr_parses_back():
    e = parse_expr("exp(x1/2) * (1 + 0.3*sin(x2))")
    e2 = parse_expr(repr(e))
    coords = np.random.default_rng(1).normal(size=(2, 6))
    assert np.allclose(e(coords), e2(coords))


def test_var_out_of_range_raises():
    with pytest.raises(ValueError):
        var(2)(pts([1.0]))
