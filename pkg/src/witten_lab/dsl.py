"""Closed-form scalar expressions with exact second-order derivatives.

Expressions are parsed from strings such as ``"x1^3/3 - x1"`` into a small
immutable AST and evaluated with forward-mode jets (value, gradient, Hessian)
vectorised over batches of points.

Grammar (loosest to tightest)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' ['-'] INT)*
    atom   := NUMBER | VAR | FUNC '(' expr ')' | '(' expr ')'
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Union

import numpy as np

FUNCTIONS = ("exp", "sin", "cos", "sqrt", "tanh")


class ExprError(ValueError):
    """Parse or evaluation error carrying the offending source span."""

    def __init__(self, message: str, span: tuple[int, int] | None = None, source: str | None = None):
        self.span = span
        self.source = source
        detail = message
        if span is not None:
            detail = f"{message} at {span[0]}:{span[1]}"
            if source:
                detail += f"\n  {source}\n  {' ' * span[0]}{'^' * max(1, span[1] - span[0])}"
        super().__init__(detail)


class ExprDomainError(ExprError):
    pass


# --------------------------------------------------------------------------
# AST

Span = tuple[int, int]


@dataclass(frozen=True)
class Num:
    value: float
    span: Span = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class Var:
    index: int  # zero-based
    span: Span = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class Neg:
    arg: "Expr"
    span: Span = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"
    span: Span = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class Pow:
    base: "Expr"
    exponent: int
    span: Span = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class Call:
    name: str
    arg: "Expr"
    span: Span = field(default=(0, 0), compare=False, repr=False)


Node = Union[Num, Var, Neg, BinOp, Pow, Call]


@dataclass(frozen=True)
class Expr:
    """A parsed expression in ``dimension`` variables ``x1..xn``."""

    root: Node
    dimension: int
    source: str = field(default="", compare=False)

    def __str__(self) -> str:
        return to_source(self.root)

    def __call__(self, point):
        return eval_jet(self, point).value


# --------------------------------------------------------------------------
# Parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()]))"
)


def _tokenize(source: str):
    pos = 0
    tokens = []
    while pos < len(source):
        if source[pos:].strip() == "":
            break
        m = _TOKEN.match(source, pos)
        if m is None or m.end() == pos:
            start = pos + (len(source[pos:]) - len(source[pos:].lstrip()))
            raise ExprError(f"unexpected character {source[start]!r}", (start, start + 1), source)
        kind = m.lastgroup
        text = m.group(kind)
        start = m.start(kind)
        tokens.append((kind, text, (start, m.end(kind))))
        pos = m.end()
    tokens.append(("end", "", (len(source), len(source))))
    return tokens


class _Parser:
    def __init__(self, source: str, dimension: int):
        self.source = source
        self.dimension = dimension
        self.tokens = _tokenize(source)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, message, span):
        raise ExprError(message, span, self.source)

    def expect(self, text):
        kind, tok, span = self.take()
        if tok != text:
            self.error(f"expected {text!r}, found {tok or 'end of input'!r}", span)
        return span

    def parse(self) -> Node:
        node = self.expr()
        kind, tok, span = self.peek()
        if kind != "end":
            self.error(f"unexpected token {tok!r}", span)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            _, op, _ = self.take()
            right = self.term()
            node = BinOp(op, node, right, (node.span[0], right.span[1]))
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            _, op, _ = self.take()
            right = self.unary()
            node = BinOp(op, node, right, (node.span[0], right.span[1]))
        return node

    def unary(self) -> Node:
        kind, tok, span = self.peek()
        if kind == "op" and tok == "-":
            self.take()
            arg = self.unary()
            return Neg(arg, (span[0], arg.span[1]))
        return self.power()

    def power(self) -> Node:
        node = self.atom()
        while self.peek()[1] == "^":
            self.take()
            sign = 1
            kind, tok, span = self.take()
            start = span[0]
            if tok == "-":
                sign = -1
                kind, tok, span = self.take()
            if kind != "num" or not re.fullmatch(r"\d+", tok):
                self.error("exponent must be an integer literal", (start, span[1]))
            node = Pow(node, sign * int(tok), (node.span[0], span[1]))
        return node

    def atom(self) -> Node:
        kind, tok, span = self.take()
        if kind == "num":
            return Num(float(tok), span)
        if kind == "name":
            if tok in FUNCTIONS:
                if self.peek()[1] != "(":
                    self.error(f"function {tok!r} expects one parenthesised argument", span)
                self.take()
                arg = self.expr()
                if self.peek()[1] != ")":
                    _, t2, s2 = self.peek()
                    self.error(f"arity mismatch: {tok} takes exactly one argument", (span[0], s2[1]))
                end = self.expect(")")
                return Call(tok, arg, (span[0], end[1]))
            m = re.fullmatch(r"x([1-9]\d*)", tok)
            if m is None or int(m.group(1)) > self.dimension:
                self.error(f"unknown identifier {tok!r}", span)
            return Var(int(m.group(1)) - 1, span)
        if kind == "op" and tok == "(":
            node = self.expr()
            self.expect(")")
            return node
        self.error(f"unexpected {tok or 'end of input'!r}", span)


def parse(source: str, dimension: int) -> Expr:
    """Parse ``source`` into an :class:`Expr` over ``x1..x{dimension}``."""
    if dimension < 1:
        raise ValueError("dimension must be positive")
    if not source or not source.strip():
        raise ExprError("empty expression", (0, 0), source)
    return Expr(_Parser(source, dimension).parse(), dimension, source)


# --------------------------------------------------------------------------
# Printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _prec(node: Node) -> int:
    if isinstance(node, BinOp):
        return _PREC[node.op]
    if isinstance(node, Neg):
        return 3
    if isinstance(node, Pow):
        return 4
    if isinstance(node, Num) and (node.value < 0 or str(node.value).startswith("-")):
        return 3
    return 5


def _fmt_num(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def to_source(node: Node) -> str:
    """Pretty-print with the minimum parentheses needed to reparse identically."""
    if isinstance(node, Num):
        return _fmt_num(node.value)
    if isinstance(node, Var):
        return f"x{node.index + 1}"
    if isinstance(node, Call):
        return f"{node.name}({to_source(node.arg)})"
    if isinstance(node, Neg):
        inner = to_source(node.arg)
        if _prec(node.arg) < 3:
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(node, Pow):
        base = to_source(node.base)
        if _prec(node.base) < 5:
            base = f"({base})"
        return f"{base}^{node.exponent}"
    p = _PREC[node.op]
    left = to_source(node.left)
    if _prec(node.left) < p:
        left = f"({left})"
    right = to_source(node.right)
    # left-associative: a right operand of equal precedence needs parentheses
    if _prec(node.right) <= p:
        right = f"({right})"
    return f"{left} {node.op} {right}"


# --------------------------------------------------------------------------
# Jets


@dataclass(frozen=True)
class JetValue:
    value: float
    gradient: np.ndarray
    hessian: np.ndarray


class _Jet:
    """Batched second-order jet: v (m,), g (m, n), H (m, n, n)."""

    __slots__ = ("v", "g", "H")

    def __init__(self, v, g, H):
        self.v, self.g, self.H = v, g, H

    def unary(self, f0, f1, f2):
        g = f1[:, None] * self.g
        H = f1[:, None, None] * self.H + f2[:, None, None] * (self.g[:, :, None] * self.g[:, None, :])
        return _Jet(f0, g, H)


def _outer_sym(a, b):
    ab = a[:, :, None] * b[:, None, :]
    return ab + ab.transpose(0, 2, 1)


def _fail(node, expr, message):
    raise ExprDomainError(f"{message} in subexpression '{to_source(node)}'", node.span, expr.source or None)


def _eval(node: Node, X: np.ndarray, expr: Expr, order: int) -> _Jet:
    m, n = X.shape
    if isinstance(node, Num):
        return _Jet(np.full(m, node.value), np.zeros((m, n)), np.zeros((m, n, n)) if order > 1 else None)
    if isinstance(node, Var):
        g = np.zeros((m, n))
        g[:, node.index] = 1.0
        return _Jet(X[:, node.index].copy(), g, np.zeros((m, n, n)) if order > 1 else None)
    if isinstance(node, Neg):
        a = _eval(node.arg, X, expr, order)
        return _Jet(-a.v, -a.g, -a.H if order > 1 else None)
    if isinstance(node, BinOp):
        a = _eval(node.left, X, expr, order)
        b = _eval(node.right, X, expr, order)
        if node.op == "+":
            return _Jet(a.v + b.v, a.g + b.g, a.H + b.H if order > 1 else None)
        if node.op == "-":
            return _Jet(a.v - b.v, a.g - b.g, a.H - b.H if order > 1 else None)
        if node.op == "/":
            if np.any(b.v == 0.0):
                _fail(node.right, expr, "division by zero")
            inv = 1.0 / b.v
            b = _apply(b, inv, -inv * inv, 2.0 * inv**3, order)
        v = a.v * b.v
        g = a.v[:, None] * b.g + b.v[:, None] * a.g
        H = None
        if order > 1:
            H = a.v[:, None, None] * b.H + b.v[:, None, None] * a.H + _outer_sym(a.g, b.g)
        return _Jet(v, g, H)
    if isinstance(node, Pow):
        a = _eval(node.base, X, expr, order)
        k = node.exponent
        if k == 0:
            return _Jet(np.ones(m), np.zeros((m, n)), np.zeros((m, n, n)) if order > 1 else None)
        if k < 0 and np.any(a.v == 0.0):
            _fail(node.base, expr, "division by zero")
        f0 = a.v**k
        f1 = k * a.v ** (k - 1)
        f2 = k * (k - 1) * a.v ** (k - 2) if k not in (0, 1) else np.zeros(m)
        return _apply(a, f0, f1, f2, order)
    if isinstance(node, Call):
        a = _eval(node.arg, X, expr, order)
        u = a.v
        if node.name == "exp":
            e = np.exp(u)
            return _apply(a, e, e, e, order)
        if node.name == "sin":
            s, c = np.sin(u), np.cos(u)
            return _apply(a, s, c, -s, order)
        if node.name == "cos":
            s, c = np.sin(u), np.cos(u)
            return _apply(a, c, -s, -c, order)
        if node.name == "tanh":
            t = np.tanh(u)
            d = 1.0 - t * t
            return _apply(a, t, d, -2.0 * t * d, order)
        if node.name == "sqrt":
            if np.any(u <= 0.0):
                _fail(node.arg, expr, "sqrt of non-positive value")
            r = np.sqrt(u)
            return _apply(a, r, 0.5 / r, -0.25 / (r * u), order)
    raise TypeError(f"unknown node {node!r}")


def _apply(a: _Jet, f0, f1, f2, order):
    g = f1[:, None] * a.g
    H = None
    if order > 1:
        H = f1[:, None, None] * a.H + f2[:, None, None] * (a.g[:, :, None] * a.g[:, None, :])
    return _Jet(f0, g, H)


def _as_points(expr: Expr, points) -> np.ndarray:
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[None, :] if expr.dimension > 1 or X.shape[0] == 1 else X[:, None]
    if X.shape[-1] != expr.dimension:
        raise ValueError(f"point dimension {X.shape[-1]} does not match expression dimension {expr.dimension}")
    return X


def eval_many(expr: Expr, points, order: int = 2):
    """Evaluate on an ``(m, n)`` batch; returns ``(value, gradient, hessian)``.

    ``order=1`` skips the Hessian (returned as ``None``).
    """
    X = _as_points(expr, points)
    with np.errstate(all="ignore"):
        jet = _eval(expr.root, X, expr, order)
    if not (np.all(np.isfinite(jet.v)) and np.all(np.isfinite(jet.g))):
        bad = int(np.flatnonzero(~np.isfinite(jet.v) | ~np.all(np.isfinite(jet.g), axis=1))[0])
        raise ExprDomainError(f"non-finite value at point {X[bad].tolist()} in '{to_source(expr.root)}'")
    H = None
    if order > 1:
        H = 0.5 * (jet.H + jet.H.transpose(0, 2, 1))
    return jet.v, jet.g, H


def eval_jet(expr: Expr, point) -> JetValue:
    """Value, gradient and Hessian of ``expr`` at a single point."""
    p = np.atleast_1d(np.asarray(point, dtype=float))
    if p.shape != (expr.dimension,):
        raise ValueError(f"point has shape {p.shape}, expected ({expr.dimension},)")
    v, g, H = eval_many(expr, p[None, :])
    return JetValue(float(v[0]), g[0], H[0])


def eval_value(expr: Expr, points) -> np.ndarray:
    return eval_many(expr, points, order=1)[0]


class ScalarField:
    """A scalar function on R^n (or ambient R^3 for surfaces) built from an expression."""

    def __init__(self, expr: Expr | str, dimension: int | None = None, name: str | None = None):
        if isinstance(expr, str):
            if dimension is None:
                raise ValueError("dimension required when parsing from text")
            expr = parse(expr, dimension)
        self.expr = expr
        self.dimension = expr.dimension
        self.name = name or str(expr)

    def __repr__(self):
        return f"ScalarField({str(self.expr)!r})"

    def value(self, points) -> np.ndarray:
        return eval_value(self.expr, points)

    def grad(self, points) -> np.ndarray:
        return eval_many(self.expr, points, order=1)[1]

    def jet(self, points):
        return eval_many(self.expr, points, order=2)

    def __call__(self, point) -> float:
        return float(self.value(np.atleast_2d(np.asarray(point, dtype=float)).reshape(-1, self.dimension))[0])


def finite_difference_jet(fun, point, step=1e-4):
    """Central-difference gradient and Hessian of a scalar callable (test oracle)."""
    x = np.asarray(point, dtype=float)
    n = x.size
    g = np.zeros(n)
    H = np.zeros((n, n))
    f0 = fun(x)
    for i in range(n):
        e = np.zeros(n)
        e[i] = step
        fp, fm = fun(x + e), fun(x - e)
        g[i] = (fp - fm) / (2 * step)
        H[i, i] = (fp - 2 * f0 + fm) / step**2
        for j in range(i + 1, n):
            d = np.zeros(n)
            d[j] = step
            H[i, j] = H[j, i] = (fun(x + e + d) - fun(x + e - d) - fun(x - e + d) + fun(x - e - d)) / (4 * step**2)
    return g, H


__all__ = [
    "Expr",
    "ExprError",
    "ExprDomainError",
    "JetValue",
    "ScalarField",
    "parse",
    "eval_jet",
    "eval_many",
    "eval_value",
    "to_source",
    "finite_difference_jet",
]
