"""Closed-form scalar expressions on R^n.

Conductivities, potentials and amplitudes are kept as small expression
trees rather than sampled arrays so that they can be evaluated on any
point set (in particular on rotated grids) and differentiated exactly.
The grammar is deliberately tiny: coordinates ``x1..xn``, literals,
``+ - * /``, ``exp``, ``sin``, ``cos``, ``sqrt`` and ``pow`` with a
constant exponent.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Expr", "Const", "Var", "parse_expr", "const", "var",
    "gradient", "laplacian",
]


class Expr:
    """Base class for expression-tree nodes.

    Nodes are immutable; arithmetic operators build new trees with
    light constant folding so that repeated differentiation does not
    blow up the tree size.
    """

    def __call__(self, coords):
        """Evaluate on points given as an array of shape (n, ...)."""
        raise NotImplementedError

    def diff(self, axis: int) -> "Expr":
        """Exact partial derivative with respect to coordinate `axis`."""
        raise NotImplementedError

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return _add(self, _wrap(other))

    def __radd__(self, other):
        return _add(_wrap(other), self)

    def __sub__(self, other):
        return _sub(self, _wrap(other))

    def __rsub__(self, other):
        return _sub(_wrap(other), self)

    def __mul__(self, other):
        return _mul(self, _wrap(other))

    def __rmul__(self, other):
        return _mul(_wrap(other), self)

    def __truediv__(self, other):
        return _div(self, _wrap(other))

    def __rtruediv__(self, other):
        return _div(_wrap(other), self)

    def __neg__(self):
        return _mul(Const(-1.0), self)

    def __pow__(self, exponent):
        return _pow(self, float(exponent))

    def is_const(self, value=None):
        return isinstance(self, Const) and (value is None or self.value == value)


class Const(Expr):
    def __init__(self, value):
        self.value = float(value)

    def __call__(self, coords):
        shape = np.asarray(coords).shape[1:]
        return np.full(shape, self.value, dtype=float)

    def diff(self, axis):
        return Const(0.0)

    def __repr__(self):
        return repr(self.value)


class Var(Expr):
    """Coordinate x_{index+1} (0-based index, 1-based name)."""

    def __init__(self, index: int):
        if index < 0:
            raise ValueError("coordinate index must be >= 0")
        self.index = index

    def __call__(self, coords):
        coords = np.asarray(coords)
        if self.index >= coords.shape[0]:
            raise ValueError(
                f"expression uses x{self.index + 1} but points have "
                f"dimension {coords.shape[0]}")
        return np.asarray(coords[self.index], dtype=float)

    def diff(self, axis):
        return Const(1.0 if axis == self.index else 0.0)

    def __repr__(self):
        return f"x{self.index + 1}"


class _Binary(Expr):
    op = "?"

    def __init__(self, left: Expr, right: Expr):
        self.left = left
        self.right = right

    def __repr__(self):
        return f"({self.left!r} {self.op} {self.right!r})"


class Add(_Binary):
    op = "+"

    def __call__(self, coords):
        return self.left(coords) + self.right(coords)

    def diff(self, axis):
        return _add(self.left.diff(axis), self.right.diff(axis))


class Sub(_Binary):
    op = "-"

    def __call__(self, coords):
        return self.left(coords) - self.right(coords)

    def diff(self, axis):
        return _sub(self.left.diff(axis), self.right.diff(axis))


class Mul(_Binary):
    op = "*"

    def __call__(self, coords):
        return self.left(coords) * self.right(coords)

    def diff(self, axis):
        return _add(_mul(self.left.diff(axis), self.right),
                    _mul(self.left, self.right.diff(axis)))


class Div(_Binary):
    op = "/"

    def __call__(self, coords):
        return self.left(coords) / self.right(coords)

    def diff(self, axis):
        num = _sub(_mul(self.left.diff(axis), self.right),
                   _mul(self.left, self.right.diff(axis)))
        return _div(num, _mul(self.right, self.right))


class Pow(Expr):
    """base**exponent with a constant real exponent."""

    def __init__(self, base: Expr, exponent: float):
        self.base = base
        self.exponent = float(exponent)

    def __call__(self, coords):
        return self.base(coords) ** self.exponent

    def diff(self, axis):
        e = self.exponent
        if e == 0.0:
            return Const(0.0)
        return _mul(_mul(Const(e), _pow(self.base, e - 1.0)),
                    self.base.diff(axis))

    def __repr__(self):
        return f"pow({self.base!r}, {self.exponent!r})"


class _Unary(Expr):
    name = "?"
    fn = None

    def __init__(self, arg: Expr):
        self.arg = arg

    def __call__(self, coords):
        return type(self).fn(self.arg(coords))

    def __repr__(self):
        return f"{self.name}({self.arg!r})"


class Exp(_Unary):
    name, fn = "exp", staticmethod(np.exp)

    def diff(self, axis):
        return _mul(self, self.arg.diff(axis))


class Sin(_Unary):
    name, fn = "sin", staticmethod(np.sin)

    def diff(self, axis):
        return _mul(Cos(self.arg), self.arg.diff(axis))


class Cos(_Unary):
    name, fn = "cos", staticmethod(np.cos)

    def diff(self, axis):
        return _mul(Const(-1.0), _mul(Sin(self.arg), self.arg.diff(axis)))


# -- folding constructors ------------------------------------------------

def _wrap(value) -> Expr:
    if isinstance(value, Expr):
        return value
    return Const(value)


def _add(a: Expr, b: Expr) -> Expr:
    if a.is_const() and b.is_const():
        return Const(a.value + b.value)
    if a.is_const(0.0):
        return b
    if b.is_const(0.0):
        return a
    return Add(a, b)


def _sub(a: Expr, b: Expr) -> Expr:
    if a.is_const() and b.is_const():
        return Const(a.value - b.value)
    if b.is_const(0.0):
        return a
    return Sub(a, b)


def _mul(a: Expr, b: Expr) -> Expr:
    if a.is_const() and b.is_const():
        return Const(a.value * b.value)
    if a.is_const(0.0) or b.is_const(0.0):
        return Const(0.0)
    if a.is_const(1.0):
        return b
    if b.is_const(1.0):
        return a
    return Mul(a, b)


def _div(a: Expr, b: Expr) -> Expr:
    if b.is_const(1.0):
        return a
    if a.is_const(0.0) and not b.is_const(0.0):
        return Const(0.0)
    if a.is_const() and b.is_const():
        return Const(a.value / b.value)
    return Div(a, b)


def _pow(base: Expr, exponent: float) -> Expr:
    if exponent == 1.0:
        return base
    if exponent == 0.0:
        return Const(1.0)
    if base.is_const():
        return Const(base.value ** exponent)
    return Pow(base, exponent)


def const(value) -> Expr:
    return Const(value)


def var(index: int) -> Expr:
    return Var(index)


def gradient(expr: Expr, n: int):
    """List of the n partial derivatives of `expr`."""
    return [expr.diff(i) for i in range(n)]


def laplacian(expr: Expr, n: int) -> Expr:
    out: Expr = Const(0.0)
    for i in range(n):
        out = _add(out, expr.diff(i).diff(i))
    return out


# -- parser ---------------------------------------------------------------

class ExprParseError(ValueError):
    """Malformed expression text; carries the offending position."""

    def __init__(self, message, position):
        super().__init__(f"{message} (at position {position})")
        self.position = position


_FUNCTIONS = {"exp": Exp, "sin": Sin, "cos": Cos}


def _tokenize(text: str):
    tokens = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c in "+-*/(),^":
            tokens.append((c, c, i))
            i += 1
            continue
        if c.isdigit() or c == ".":
            j = i
            while j < n and (text[j].isdigit() or text[j] in ".eE" or
                             (text[j] in "+-" and text[j - 1] in "eE")):
                j += 1
            try:
                value = float(text[i:j])
            except ValueError:
                raise ExprParseError(f"bad numeric literal {text[i:j]!r}", i)
            tokens.append(("num", value, i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(("name", text[i:j], i))
            i = j
            continue
        raise ExprParseError(f"unexpected character {c!r}", i)
    tokens.append(("end", None, n))
    return tokens


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos]

    def next(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind):
        tok = self.next()
        if tok[0] != kind:
            raise ExprParseError(f"expected {kind!r}, found {tok[1]!r}", tok[2])
        return tok

    def parse(self):
        expr = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise ExprParseError(f"trailing input {tok[1]!r}", tok[2])
        return expr

    def expr(self):
        node = self.term()
        while self.peek()[0] in "+-":
            op = self.next()[0]
            rhs = self.term()
            node = _add(node, rhs) if op == "+" else _sub(node, rhs)
        return node

    def term(self):
        node = self.unary()
        while self.peek()[0] in "*/":
            op = self.next()[0]
            rhs = self.unary()
            node = _mul(node, rhs) if op == "*" else _div(node, rhs)
        return node

    def unary(self):
        if self.peek()[0] == "-":
            self.next()
            return _mul(Const(-1.0), self.unary())
        if self.peek()[0] == "+":
            self.next()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[0] == "^":
            tok = self.next()
            exp_tok = self.peek()
            sign = 1.0
            if exp_tok[0] == "-":
                self.next()
                sign = -1.0
                exp_tok = self.peek()
            if exp_tok[0] != "num":
                raise ExprParseError("exponent must be a numeric literal", tok[2])
            self.next()
            return _pow(base, sign * exp_tok[1])
        return base

    def atom(self):
        kind, value, pos = self.next()
        if kind == "num":
            return Const(value)
        if kind == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "name":
            if value in _FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return _FUNCTIONS[value](arg)
            if value == "sqrt":
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return _pow(arg, 0.5)
            if value == "pow":
                self.expect("(")
                base = self.expr()
                self.expect(",")
                exponent = self.expr()
                self.expect(")")
                if not exponent.is_const():
                    raise ExprParseError("pow exponent must be constant", pos)
                return _pow(base, exponent.value)
            if value.startswith("x") and value[1:].isdigit():
                idx = int(value[1:])
                if idx < 1:
                    raise ExprParseError(f"bad coordinate {value!r}", pos)
                return Var(idx - 1)
            raise ExprParseError(f"unknown identifier {value!r}", pos)
        raise ExprParseError(f"unexpected token {value!r}", pos)


def parse_expr(text: str) -> Expr:
    """Parse the mini arithmetic grammar into an expression tree."""
    return _Parser(_tokenize(text)).parse()
