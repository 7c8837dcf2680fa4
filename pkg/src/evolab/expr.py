"""Minimal expression language for time-space coefficient functions.

Expressions are scalar functions of (t, x1..xd).  The grammar is

    expr   := term (('+'|'-') term)*
    term   := factor (('*'|'/') factor)*
    factor := '-' factor | power
    power  := atom ('^' factor)?
    atom   := number | ident | ident '(' expr (',' expr)? ')' | '(' expr ')'

with `^` right-associative and binding tighter than unary minus applied
to its base.  The special identifier `r` stands for the Euclidean norm
of x and must be expanded via :func:`desugar_r` before differentiation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Expr", "Num", "Var", "Unary", "Binary", "Call",
    "ExprError", "ParseError", "DomainError", "UnsupportedFormError",
    "parse", "evaluate", "diff", "to_source", "desugar_r", "free_vars",
]

_UNARY_FUNCS = ("neg", "sin", "cos", "exp", "log", "sqrt", "abs")
_BINARY_OPS = ("+", "-", "*", "/", "^")
_CALLS = ("min", "max")


class ExprError(Exception):
    """Base class for expression-language errors."""


class ParseError(ExprError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class DomainError(ExprError):
    """Evaluation hit a point outside the domain of a sub-expression."""

    def __init__(self, message, node):
        super().__init__(f"{message} in {to_source(node)}")
        self.node = node


class UnsupportedFormError(ExprError):
    """Differentiation was asked for a node kind it does not admit."""


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    # name is "t", "r", or "x<i>" with 1-based index i
    name: str

    @property
    def index(self):
        """Spatial index (1-based) for x-variables, else None."""
        if self.name.startswith("x"):
            return int(self.name[1:])
        return None


@dataclass(frozen=True)
class Unary:
    op: str
    arg: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple


Expr = Num | Var | Unary | Binary | Call


# ---------------------------------------------------------------------------
# parsing

class _Tokenizer:
    def __init__(self, source):
        self.source = source
        self.pos = 0

    def skip_ws(self):
        while self.pos < len(self.source) and self.source[self.pos].isspace():
            self.pos += 1

    def peek(self):
        self.skip_ws()
        if self.pos >= len(self.source):
            return None
        return self.source[self.pos]

    def take_number(self):
        start = self.pos
        s = self.source
        n = len(s)
        i = self.pos
        while i < n and s[i].isdigit():
            i += 1
        if i < n and s[i] == ".":
            i += 1
            while i < n and s[i].isdigit():
                i += 1
        if i < n and s[i] in "eE":
            j = i + 1
            if j < n and s[j] in "+-":
                j += 1
            if j < n and s[j].isdigit():
                i = j
                while i < n and s[i].isdigit():
                    i += 1
        text = s[start:i]
        try:
            value = float(text)
        except ValueError:
            raise ParseError(f"bad number literal {text!r}", start)
        self.pos = i
        return value

    def take_ident(self):
        start = self.pos
        s = self.source
        i = self.pos
        while i < len(s) and (s[i].isalnum() or s[i] == "_"):
            i += 1
        self.pos = i
        return s[start:i]


def parse(source, dim):
    """Parse `source` into an Expr with spatial dimension `dim`."""
    if not isinstance(source, str) or not source.strip():
        raise ParseError("empty expression", 0)
    if dim < 1:
        raise ValueError("dim must be >= 1")
    tok = _Tokenizer(source)
    e = _parse_expr(tok, dim)
    tok.skip_ws()
    if tok.pos != len(source):
        raise ParseError(f"unexpected character {source[tok.pos]!r}", tok.pos)
    return e


def _parse_expr(tok, dim):
    e = _parse_term(tok, dim)
    while tok.peek() in ("+", "-"):
        op = tok.peek()
        tok.pos += 1
        rhs = _parse_term(tok, dim)
        e = Binary(op, e, rhs)
    return e


def _parse_term(tok, dim):
    e = _parse_factor(tok, dim)
    while tok.peek() in ("*", "/"):
        op = tok.peek()
        tok.pos += 1
        rhs = _parse_factor(tok, dim)
        e = Binary(op, e, rhs)
    return e


def _parse_factor(tok, dim):
    if tok.peek() == "-":
        tok.pos += 1
        return Unary("neg", _parse_factor(tok, dim))
    return _parse_power(tok, dim)


def _parse_power(tok, dim):
    base = _parse_atom(tok, dim)
    if tok.peek() == "^":
        tok.pos += 1
        exponent = _parse_factor(tok, dim)
        return Binary("^", base, exponent)
    return base


def _parse_atom(tok, dim):
    ch = tok.peek()
    if ch is None:
        raise ParseError("unexpected end of input", tok.pos)
    if ch.isdigit() or ch == ".":
        return Num(tok.take_number())
    if ch == "(":
        tok.pos += 1
        e = _parse_expr(tok, dim)
        if tok.peek() != ")":
            raise ParseError("expected ')'", tok.pos)
        tok.pos += 1
        return e
    if ch.isalpha() or ch == "_":
        start = tok.pos
        name = tok.take_ident()
        if tok.peek() == "(":
            tok.pos += 1
            args = [_parse_expr(tok, dim)]
            if tok.peek() == ",":
                tok.pos += 1
                args.append(_parse_expr(tok, dim))
            if tok.peek() != ")":
                raise ParseError("expected ')'", tok.pos)
            tok.pos += 1
            if name in ("neg", "sin", "cos", "exp", "log", "sqrt", "abs"):
                if len(args) != 1:
                    raise ParseError(f"{name} takes one argument", start)
                return Unary(name, args[0])
            if name in _CALLS:
                if len(args) != 2:
                    raise ParseError(f"{name} takes two arguments", start)
                return Call(name, tuple(args))
            raise ParseError(f"unknown function {name!r}", start)
        if name == "t" or name == "r":
            return Var(name)
        if name.startswith("x") and name[1:].isdigit():
            idx = int(name[1:])
            if idx < 1 or idx > dim:
                raise ParseError(
                    f"variable {name} exceeds dimension {dim}", start)
            return Var(name)
        raise ParseError(f"unknown identifier {name!r}", start)
    raise ParseError(f"unexpected character {ch!r}", tok.pos)


# ---------------------------------------------------------------------------
# printing

def to_source(e):
    """Emit expression text in the same grammar (fully parenthesized)."""
    if isinstance(e, Num):
        if e.value < 0 or (e.value == 0 and math.copysign(1.0, e.value) < 0):
            return f"(-{abs(e.value)!r})"
        return repr(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Unary):
        if e.op == "neg":
            return f"(-{to_source(e.arg)})"
        return f"{e.op}({to_source(e.arg)})"
    if isinstance(e, Binary):
        return f"({to_source(e.left)}{e.op}{to_source(e.right)})"
    if isinstance(e, Call):
        return f"{e.name}({to_source(e.args[0])},{to_source(e.args[1])})"
    raise TypeError(f"not an Expr: {e!r}")


# ---------------------------------------------------------------------------
# evaluation

def evaluate(e, t, x):
    """Evaluate `e` at time t and point x (sequence of d coordinates).

    Coordinates may be scalars or numpy arrays of a common shape; the
    result broadcasts accordingly.  Raises DomainError at points outside
    the domain of a sub-expression.
    """
    if np.isscalar(x):
        coords = [np.asarray(x, dtype=float)]
    else:
        coords = [np.asarray(xi, dtype=float) for xi in x]
    return _eval(e, float(t), coords)


def _eval(e, t, x):
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        if e.name == "t":
            return t
        if e.name == "r":
            return np.sqrt(sum(np.asarray(xi) ** 2 for xi in x))
        idx = e.index
        if idx is None or idx > len(x):
            raise DomainError(f"variable {e.name} out of range", e)
        return x[idx - 1]
    if isinstance(e, Unary):
        v = _eval(e.arg, t, x)
        if e.op == "neg":
            return -v
        if e.op == "sin":
            return np.sin(v)
        if e.op == "cos":
            return np.cos(v)
        if e.op == "exp":
            return np.exp(v)
        if e.op == "log":
            if np.any(np.asarray(v) <= 0):
                raise DomainError("log of non-positive value", e)
            return np.log(v)
        if e.op == "sqrt":
            if np.any(np.asarray(v) < 0):
                raise DomainError("sqrt of negative value", e)
            return np.sqrt(v)
        if e.op == "abs":
            return np.abs(v)
        raise TypeError(f"unknown unary op {e.op}")
    if isinstance(e, Binary):
        a = _eval(e.left, t, x)
        b = _eval(e.right, t, x)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if e.op == "/":
            if np.any(np.asarray(b) == 0):
                raise DomainError("division by zero", e)
            return a / b
        if e.op == "^":
            a_arr = np.asarray(a, dtype=float)
            b_arr = np.asarray(b, dtype=float)
            if np.any((a_arr == 0) & (b_arr < 0)):
                raise DomainError("zero raised to negative power", e)
            if np.any((a_arr < 0) & (b_arr != np.floor(b_arr))):
                raise DomainError("negative base with non-integer exponent", e)
            with np.errstate(invalid="ignore"):
                out = np.power(a_arr, b_arr)
            if out.ndim == 0:
                return float(out)
            return out
        raise TypeError(f"unknown binary op {e.op}")
    if isinstance(e, Call):
        a = _eval(e.args[0], t, x)
        b = _eval(e.args[1], t, x)
        return np.minimum(a, b) if e.name == "min" else np.maximum(a, b)
    raise TypeError(f"not an Expr: {e!r}")


# ---------------------------------------------------------------------------
# smart constructors with constant folding of trivial identities

def _num(v):
    return Num(float(v))


def _is_const(e, v=None):
    return isinstance(e, Num) and (v is None or e.value == v)


def add(a, b):
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    if _is_const(a) and _is_const(b):
        return _num(a.value + b.value)
    return Binary("+", a, b)


def sub(a, b):
    if _is_const(b, 0.0):
        return a
    if _is_const(a) and _is_const(b):
        return _num(a.value - b.value)
    if _is_const(a, 0.0):
        return Unary("neg", b)
    return Binary("-", a, b)


def mul(a, b):
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return _num(0.0)
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a) and _is_const(b):
        return _num(a.value * b.value)
    return Binary("*", a, b)


def div(a, b):
    if _is_const(a, 0.0):
        return _num(0.0)
    if _is_const(b, 1.0):
        return a
    return Binary("/", a, b)


def pow_(a, b):
    if _is_const(b, 1.0):
        return a
    if _is_const(b, 0.0):
        return _num(1.0)
    return Binary("^", a, b)


# ---------------------------------------------------------------------------
# differentiation

def _contains(e, pred):
    if pred(e):
        return True
    if isinstance(e, Unary):
        return _contains(e.arg, pred)
    if isinstance(e, Binary):
        return _contains(e.left, pred) or _contains(e.right, pred)
    if isinstance(e, Call):
        return any(_contains(a, pred) for a in e.args)
    return False


def diff(e, var):
    """Exact symbolic derivative of `e` with respect to variable `var`.

    `var` is a variable name ("t" or "x<i>").  The expression must not
    contain `r` (expand it with desugar_r first), a `^` with non-constant
    exponent, or min/max calls.
    """
    if isinstance(var, Var):
        var = var.name
    if _contains(e, lambda n: isinstance(n, Var) and n.name == "r"):
        raise UnsupportedFormError(
            "cannot differentiate through r; apply desugar_r first")
    return _diff(e, var)


def _diff(e, var):
    if isinstance(e, Num):
        return _num(0.0)
    if isinstance(e, Var):
        return _num(1.0 if e.name == var else 0.0)
    if isinstance(e, Unary):
        du = _diff(e.arg, var)
        u = e.arg
        if e.op == "neg":
            return sub(_num(0.0), du) if not _is_const(du, 0.0) else _num(0.0)
        if e.op == "sin":
            return mul(Unary("cos", u), du)
        if e.op == "cos":
            return mul(Unary("neg", Unary("sin", u)), du)
        if e.op == "exp":
            return mul(Unary("exp", u), du)
        if e.op == "log":
            return div(du, u)
        if e.op == "sqrt":
            return div(du, mul(_num(2.0), Unary("sqrt", u)))
        if e.op == "abs":
            # u/|u| * du; exact away from u = 0
            return mul(div(u, Unary("abs", u)), du)
        raise TypeError(f"unknown unary op {e.op}")
    if isinstance(e, Binary):
        if e.op == "+":
            return add(_diff(e.left, var), _diff(e.right, var))
        if e.op == "-":
            return sub(_diff(e.left, var), _diff(e.right, var))
        if e.op == "*":
            return add(mul(_diff(e.left, var), e.right),
                       mul(e.left, _diff(e.right, var)))
        if e.op == "/":
            num = sub(mul(_diff(e.left, var), e.right),
                      mul(e.left, _diff(e.right, var)))
            return div(num, pow_(e.right, _num(2.0)))
        if e.op == "^":
            if not isinstance(e.right, Num):
                raise UnsupportedFormError(
                    "cannot differentiate a^b with non-constant exponent")
            n = e.right.value
            return mul(mul(_num(n), pow_(e.left, _num(n - 1.0))),
                       _diff(e.left, var))
        raise TypeError(f"unknown binary op {e.op}")
    if isinstance(e, Call):
        raise UnsupportedFormError(f"cannot differentiate {e.name}")
    raise TypeError(f"not an Expr: {e!r}")


# ---------------------------------------------------------------------------
# r-desugaring and variable inspection

def _r_squared(dim):
    s = pow_(Var("x1"), _num(2.0))
    for i in range(2, dim + 1):
        s = add(s, pow_(Var(f"x{i}"), _num(2.0)))
    return s


def desugar_r(e, dim):
    """Replace every `r` node by sqrt(x1^2 + ... + xd^2).

    Even powers r^(2k) become (x1^2 + ... + xd^2)^k directly, keeping
    them polynomial (and differentiable at the origin)."""
    if (isinstance(e, Binary) and e.op == "^"
            and isinstance(e.left, Var) and e.left.name == "r"
            and isinstance(e.right, Num)
            and float(e.right.value) == int(e.right.value)
            and int(e.right.value) % 2 == 0):
        return pow_(_r_squared(dim), _num(e.right.value / 2.0))
    if isinstance(e, Var) and e.name == "r":
        return Unary("sqrt", _r_squared(dim))
    if isinstance(e, Unary):
        return Unary(e.op, desugar_r(e.arg, dim))
    if isinstance(e, Binary):
        return Binary(e.op, desugar_r(e.left, dim), desugar_r(e.right, dim))
    if isinstance(e, Call):
        return Call(e.name, tuple(desugar_r(a, dim) for a in e.args))
    return e


def free_vars(e):
    """Set of variable names appearing in `e`."""
    out = set()

    def walk(n):
        if isinstance(n, Var):
            out.add(n.name)
        elif isinstance(n, Unary):
            walk(n.arg)
        elif isinstance(n, Binary):
            walk(n.left)
            walk(n.right)
        elif isinstance(n, Call):
            for a in n.args:
                walk(a)

    walk(e)
    return out
