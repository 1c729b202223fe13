"""Scalar expressions in the coordinates of R^n and exact symbolic derivatives.

The grammar covers decimal literals, variables, ``+ - * / ^``, parentheses and
the functions ``sin``, ``cos`` and ``exp``.  Power binds tighter than unary
minus, so ``-x^2`` is ``-(x^2)``; exponents must fold to integer constants.

Derivative trees are produced by structural recursion with constant folding
only, and :class:`VectorFieldSet` caches the Jacobian and Hessian trees of a
family of vector fields.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Expression",
    "Num",
    "Var",
    "Neg",
    "Add",
    "Sub",
    "Mul",
    "Div",
    "Pow",
    "Call",
    "ExprSyntaxError",
    "UnknownIdentifierError",
    "DomainError",
    "parse",
    "differentiate",
    "VectorFieldSet",
    "eval_field",
    "eval_jacobian",
    "eval_hessian",
]

FUNCTIONS: dict[str, Callable[[float], float]] = {
    "sin": math.sin,
    "cos": math.cos,
    "exp": math.exp,
}


class ExprSyntaxError(ValueError):
    """Malformed source text; ``offset`` is the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class UnknownIdentifierError(ValueError):
    """An identifier that is neither a declared variable nor a known function."""

    def __init__(self, name: str, offset: int):
        super().__init__(f"unknown identifier {name!r} (at offset {offset})")
        self.name = name
        self.offset = offset


class DomainError(ArithmeticError):
    """Evaluation hit a division by zero (or an overflowing power/exp)."""


# --------------------------------------------------------------------------
# AST
# --------------------------------------------------------------------------

# Binding strength used by the printer.
_P_SUM, _P_PROD, _P_UNARY, _P_POW, _P_ATOM = 1, 2, 3, 4, 5


class Expression:
    """Base class of the immutable expression tree."""

    precedence = _P_ATOM

    def evaluate(self, values: Sequence[float]) -> float:
        values = [float(v) for v in values]
        try:
            return self._compiled()(values)
        except (ZeroDivisionError, OverflowError) as exc:
            raise DomainError(f"cannot evaluate {self} at {tuple(values)}: {exc}") from None

    def _compiled(self) -> Callable[[Sequence[float]], float]:
        fn = self.__dict__.get("_fn")
        if fn is None:
            fn = self._build()
            object.__setattr__(self, "_fn", fn)
        return fn

    def _build(self) -> Callable[[Sequence[float]], float]:
        raise NotImplementedError

    def diff(self, var: int) -> "Expression":
        raise NotImplementedError

    def variables(self) -> frozenset[int]:
        return frozenset()

    def _wrap(self, child: "Expression", min_prec: int) -> str:
        text = str(child)
        return f"({text})" if child.precedence < min_prec else text


@dataclass(frozen=True, eq=True)
class Num(Expression):
    value: float

    @property
    def precedence(self) -> int:  # type: ignore[override]
        return _P_UNARY if self.value < 0 or math.copysign(1.0, self.value) < 0 else _P_ATOM

    def _build(self):
        v = float(self.value)
        return lambda q: v

    def diff(self, var: int) -> Expression:
        return ZERO

    def __str__(self) -> str:
        v = float(self.value)
        if v.is_integer() and abs(v) < 1e16:
            return str(int(v)) if v != 0 or math.copysign(1.0, v) > 0 else "-0"
        return repr(v)


@dataclass(frozen=True, eq=True)
class Var(Expression):
    index: int
    name: str

    def _build(self):
        i = self.index
        return lambda q: q[i]

    def diff(self, var: int) -> Expression:
        return ONE if var == self.index else ZERO

    def variables(self) -> frozenset[int]:
        return frozenset({self.index})

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True, eq=True)
class Neg(Expression):
    arg: Expression
    precedence = _P_UNARY

    def _build(self):
        f = self.arg._compiled()
        return lambda q: -f(q)

    def diff(self, var: int) -> Expression:
        return neg(self.arg.diff(var))

    def variables(self) -> frozenset[int]:
        return self.arg.variables()

    def __str__(self) -> str:
        # -(a*b) and -a*b evaluate identically, so only sums need parentheses.
        return "-" + self._wrap(self.arg, _P_PROD)


@dataclass(frozen=True, eq=True)
class _Binary(Expression):
    left: Expression
    right: Expression

    symbol = "?"

    def variables(self) -> frozenset[int]:
        return self.left.variables() | self.right.variables()

    def __str__(self) -> str:
        p = self.precedence
        # Left-associative: the right operand needs parentheses at equal precedence.
        return f"{self._wrap(self.left, p)} {self.symbol} {self._wrap(self.right, p + 1)}"


class Add(_Binary):
    symbol = "+"
    precedence = _P_SUM

    def _build(self):
        a, b = self.left._compiled(), self.right._compiled()
        return lambda q: a(q) + b(q)

    def diff(self, var: int) -> Expression:
        return add(self.left.diff(var), self.right.diff(var))


class Sub(_Binary):
    symbol = "-"
    precedence = _P_SUM

    def _build(self):
        a, b = self.left._compiled(), self.right._compiled()
        return lambda q: a(q) - b(q)

    def diff(self, var: int) -> Expression:
        return sub(self.left.diff(var), self.right.diff(var))


class Mul(_Binary):
    symbol = "*"
    precedence = _P_PROD

    def _build(self):
        a, b = self.left._compiled(), self.right._compiled()
        return lambda q: a(q) * b(q)

    def diff(self, var: int) -> Expression:
        a, b = self.left, self.right
        return add(mul(a.diff(var), b), mul(a, b.diff(var)))


class Div(_Binary):
    symbol = "/"
    precedence = _P_PROD

    def _build(self):
        a, b = self.left._compiled(), self.right._compiled()
        return lambda q: a(q) / b(q)

    def diff(self, var: int) -> Expression:
        a, b = self.left, self.right
        num = sub(mul(a.diff(var), b), mul(a, b.diff(var)))
        return div(num, power(b, 2))


@dataclass(frozen=True, eq=True)
class Pow(Expression):
    base: Expression
    exponent: int
    precedence = _P_POW

    def _build(self):
        f, n = self.base._compiled(), self.exponent
        return lambda q: f(q) ** n

    def diff(self, var: int) -> Expression:
        n = self.exponent
        return mul(mul(Num(float(n)), power(self.base, n - 1)), self.base.diff(var))

    def variables(self) -> frozenset[int]:
        return self.base.variables()

    def __str__(self) -> str:
        n = self.exponent
        exp_text = str(n) if n >= 0 else f"({n})"
        return f"{self._wrap(self.base, _P_ATOM)}^{exp_text}"


@dataclass(frozen=True, eq=True)
class Call(Expression):
    func: str
    arg: Expression

    def _build(self):
        f, g = FUNCTIONS[self.func], self.arg._compiled()
        return lambda q: f(g(q))

    def diff(self, var: int) -> Expression:
        inner = self.arg.diff(var)
        if self.func == "sin":
            outer: Expression = call("cos", self.arg)
        elif self.func == "cos":
            outer = neg(call("sin", self.arg))
        else:
            outer = self
        return mul(outer, inner)

    def variables(self) -> frozenset[int]:
        return self.arg.variables()

    def __str__(self) -> str:
        return f"{self.func}({self.arg})"


ZERO = Num(0.0)
ONE = Num(1.0)


# --------------------------------------------------------------------------
# Folding constructors
# --------------------------------------------------------------------------

def _is(e: Expression, v: float) -> bool:
    return isinstance(e, Num) and e.value == v


def _num(v: float) -> Expression | None:
    return Num(float(v)) if math.isfinite(v) else None


def neg(a: Expression) -> Expression:
    if isinstance(a, Num):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def add(a: Expression, b: Expression) -> Expression:
    if isinstance(a, Num) and isinstance(b, Num):
        return _num(a.value + b.value) or Add(a, b)
    if _is(a, 0.0):
        return b
    if _is(b, 0.0):
        return a
    return Add(a, b)


def sub(a: Expression, b: Expression) -> Expression:
    if isinstance(a, Num) and isinstance(b, Num):
        return _num(a.value - b.value) or Sub(a, b)
    if _is(b, 0.0):
        return a
    if _is(a, 0.0):
        return neg(b)
    return Sub(a, b)


def mul(a: Expression, b: Expression) -> Expression:
    if isinstance(a, Num) and isinstance(b, Num):
        return _num(a.value * b.value) or Mul(a, b)
    if _is(a, 0.0) or _is(b, 0.0):
        return ZERO
    if _is(a, 1.0):
        return b
    if _is(b, 1.0):
        return a
    if _is(a, -1.0):
        return neg(b)
    if _is(b, -1.0):
        return neg(a)
    return Mul(a, b)


def div(a: Expression, b: Expression) -> Expression:
    if isinstance(a, Num) and isinstance(b, Num) and b.value != 0.0:
        return _num(a.value / b.value) or Div(a, b)
    if _is(b, 1.0):
        return a
    return Div(a, b)


def power(a: Expression, n: int) -> Expression:
    if n == 0:
        return ONE
    if n == 1:
        return a
    if isinstance(a, Num):
        try:
            folded = _num(a.value ** n)
        except (ZeroDivisionError, OverflowError):
            folded = None
        if folded is not None:
            return folded
    return Pow(a, n)


def call(func: str, a: Expression) -> Expression:
    if isinstance(a, Num):
        try:
            folded = _num(FUNCTIONS[func](a.value))
        except OverflowError:
            folded = None
        if folded is not None:
            return folded
    return Call(func, a)


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^()]))"
)


@dataclass(frozen=True)
class _Tok:
    kind: str  # "num", "ident", "op" or "end"
    text: str
    offset: int


def _tokenize(source: str) -> list[_Tok]:
    toks: list[_Tok] = []
    pos = 0
    while True:
        while pos < len(source) and source[pos].isspace():
            pos += 1
        if pos >= len(source):
            break
        m = _TOKEN.match(source, pos)
        if m is None or m.lastgroup is None:
            raise ExprSyntaxError(f"unexpected character {source[pos]!r}", pos)
        kind = m.lastgroup
        start = m.start(kind)
        toks.append(_Tok(kind, m.group(kind), start))
        pos = m.end()
    # End of input is reported at the last non-blank byte.
    end = max(len(source.rstrip()) - 1, 0)
    toks.append(_Tok("end", "", end))
    return toks


class _Parser:
    def __init__(self, source: str, variables: Sequence[str]):
        self.toks = _tokenize(source)
        self.pos = 0
        self.vars = {name: i for i, name in enumerate(variables)}

    def peek(self) -> _Tok:
        return self.toks[self.pos]

    def take(self) -> _Tok:
        tok = self.toks[self.pos]
        self.pos += 1
        return tok

    def expect(self, text: str) -> None:
        tok = self.peek()
        if tok.kind == "end":
            raise ExprSyntaxError(f"unexpected end of input, expected {text!r}", tok.offset)
        if tok.text != text:
            raise ExprSyntaxError(f"expected {text!r}, found {tok.text!r}", tok.offset)
        self.take()

    def parse(self) -> Expression:
        e = self.sum()
        tok = self.peek()
        if tok.kind != "end":
            raise ExprSyntaxError(f"unexpected {tok.text!r}", tok.offset)
        return e

    def sum(self) -> Expression:
        e = self.product()
        while self.peek().text in ("+", "-") and self.peek().kind == "op":
            op = self.take().text
            rhs = self.product()
            e = add(e, rhs) if op == "+" else sub(e, rhs)
        return e

    def product(self) -> Expression:
        e = self.unary()
        while self.peek().text in ("*", "/") and self.peek().kind == "op":
            op = self.take().text
            rhs = self.unary()
            e = mul(e, rhs) if op == "*" else div(e, rhs)
        return e

    def unary(self) -> Expression:
        tok = self.peek()
        if tok.kind == "op" and tok.text == "-":
            self.take()
            return neg(self.unary())
        if tok.kind == "op" and tok.text == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self) -> Expression:
        base = self.primary()
        if self.peek().kind == "op" and self.peek().text == "^":
            self.take()
            at = self.peek().offset
            exponent = self.unary()
            if not isinstance(exponent, Num) or not float(exponent.value).is_integer():
                raise ExprSyntaxError("exponent must be an integer constant", at)
            return power(base, int(exponent.value))
        return base

    def primary(self) -> Expression:
        tok = self.take()
        if tok.kind == "num":
            return Num(float(tok.text))
        if tok.kind == "ident":
            if self.peek().kind == "op" and self.peek().text == "(":
                if tok.text not in FUNCTIONS:
                    raise UnknownIdentifierError(tok.text, tok.offset)
                self.take()
                arg = self.sum()
                self.expect(")")
                return call(tok.text, arg)
            if tok.text in self.vars:
                return Var(self.vars[tok.text], tok.text)
            if tok.text in FUNCTIONS:
                raise ExprSyntaxError(f"function {tok.text!r} needs an argument", tok.offset)
            raise UnknownIdentifierError(tok.text, tok.offset)
        if tok.kind == "op" and tok.text == "(":
            e = self.sum()
            self.expect(")")
            return e
        if tok.kind == "end":
            raise ExprSyntaxError("unexpected end of input", tok.offset)
        raise ExprSyntaxError(f"unexpected {tok.text!r}", tok.offset)


def parse(source: str, variables: Sequence[str] = ("x", "y", "z")) -> Expression:
    """Parse ``source`` with ``variables`` naming the coordinates in order."""
    return _Parser(source, variables).parse()


def differentiate(e: Expression, var: int) -> Expression:
    """Exact partial derivative of ``e`` with respect to coordinate ``var``."""
    return e.diff(var)


# --------------------------------------------------------------------------
# Vector fields
# --------------------------------------------------------------------------

class VectorFieldSet:
    """k vector fields on R^n given componentwise by expressions.

    ``components[i][a]`` is the a-th component of field i.  Jacobian entries
    ``jac[i][a][b]`` are d(X_i^a)/dq_b; Hessian entries ``hess[i][a][b][c]``
    are built once for b <= c and shared, so every evaluated Hessian is
    symmetric in its last two slots bit for bit.
    """

    def __init__(self, components: Sequence[Sequence[Expression | str]], variables: Sequence[str]):
        self.variables = tuple(variables)
        n = len(self.variables)
        if n == 0:
            raise ValueError("at least one coordinate is required")
        rows = [list(r) for r in components]
        if not rows:
            raise ValueError("at least one field is required")
        for i, r in enumerate(rows):
            if len(r) != n:
                raise ValueError(f"field {i} has {len(r)} components, expected {n}")
        self.sources = tuple(
            tuple(c if isinstance(c, str) else str(c) for c in r) for r in rows
        )
        self.components = tuple(
            tuple(parse(c, self.variables) if isinstance(c, str) else c for c in r) for r in rows
        )
        self.n = n
        self.k = len(rows)
        self.jac = tuple(
            tuple(tuple(c.diff(b) for b in range(n)) for c in field) for field in self.components
        )
        hess = []
        for field in self.jac:
            per_comp = []
            for row in field:
                grid: list[list[Expression | None]] = [[None] * n for _ in range(n)]
                for b in range(n):
                    for c in range(b, n):
                        d = row[b].diff(c)
                        grid[b][c] = d
                        grid[c][b] = d
                per_comp.append(tuple(tuple(g) for g in grid))
            hess.append(tuple(per_comp))
        self.hess = tuple(hess)

        self._f = [[c._compiled() for c in field] for field in self.components]
        self._j = [[[e._compiled() for e in row] for row in field] for field in self.jac]
        self._h = [[[[e._compiled() for e in r] for r in comp] for comp in field] for field in self.hess]

    def _call(self, fn: Callable[[], np.ndarray], q) -> np.ndarray:
        try:
            return fn()
        except (ZeroDivisionError, OverflowError) as exc:
            raise DomainError(f"vector field undefined at q={tuple(float(x) for x in q)}: {exc}") from None

    def field(self, i: int, q) -> np.ndarray:
        qq = [float(x) for x in q]
        return self._call(lambda: np.array([f(qq) for f in self._f[i]]), qq)

    def jacobian(self, i: int, q) -> np.ndarray:
        qq = [float(x) for x in q]
        return self._call(lambda: np.array([[f(qq) for f in row] for row in self._j[i]]), qq)

    def hessian(self, i: int, q) -> np.ndarray:
        qq = [float(x) for x in q]
        return self._call(
            lambda: np.array([[[f(qq) for f in r] for r in comp] for comp in self._h[i]]), qq
        )

    def fields_at(self, q) -> np.ndarray:
        """All fields at q, shape (k, n)."""
        qq = [float(x) for x in q]
        return self._call(lambda: np.array([[f(qq) for f in fs] for fs in self._f]), qq)

    def jacobians_at(self, q) -> np.ndarray:
        """All Jacobians at q, shape (k, n, n)."""
        qq = [float(x) for x in q]
        return self._call(
            lambda: np.array([[[f(qq) for f in row] for row in fs] for fs in self._j]), qq
        )

    def hessians_at(self, q) -> np.ndarray:
        """All Hessians at q, shape (k, n, n, n)."""
        qq = [float(x) for x in q]
        return self._call(
            lambda: np.array(
                [[[[f(qq) for f in r] for r in comp] for comp in fs] for fs in self._h]
            ),
            qq,
        )

    def bracket(self, i: int, j: int) -> tuple[Expression, ...]:
        """Symbolic Lie bracket [X_i, X_j] = DX_j[X_i] - DX_i[X_j]."""
        out = []
        for a in range(self.n):
            term: Expression = ZERO
            for b in range(self.n):
                term = add(term, mul(self.components[i][b], self.jac[j][a][b]))
                term = sub(term, mul(self.components[j][b], self.jac[i][a][b]))
            out.append(term)
        return tuple(out)

    def eval_bracket(self, i: int, j: int, q) -> np.ndarray:
        qq = [float(x) for x in q]
        exprs = self.bracket(i, j)
        return self._call(lambda: np.array([e._compiled()(qq) for e in exprs]), qq)


def eval_field(F: VectorFieldSet, i: int, q) -> np.ndarray:
    return F.field(i, q)


def eval_jacobian(F: VectorFieldSet, i: int, q) -> np.ndarray:
    return F.jacobian(i, q)


def eval_hessian(F: VectorFieldSet, i: int, q) -> np.ndarray:
    return F.hessian(i, q)
