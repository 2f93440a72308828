"""Expression trees for difference-equation right-hand sides.

Five node types cover everything the grammar and the sparse regression can
produce: numeric constants, variable leaves (a product of one or more
channel factors), negation, binary ``+ - *`` and integer powers of a
variable leaf.  Factors are channel names, optionally lagged (``I_B[t-2]``).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import EvaluationError, ExpressionSyntaxError
from .variables import VARIABLES

_LAG_RE = re.compile(r"^([A-Za-z_]+)\[t-(\d+)\]$")


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    factors: tuple


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Pow:
    base: Var
    exponent: int


Node = Union[Const, Var, Neg, BinOp, Pow]


def split_factor(factor):
    """Return ``(channel, lag)`` for a factor name such as ``"I_B[t-2]"``."""
    m = _LAG_RE.match(factor)
    if m:
        return m.group(1), int(m.group(2))
    return factor, 0


def lagged(name, lag):
    return name if lag == 0 else f"{name}[t-{lag}]"


def variable(*names):
    return Var(tuple(names))


def add(a, b):
    return BinOp("+", a, b)


def sub(a, b):
    return BinOp("-", a, b)


def mul(a, b):
    return BinOp("*", a, b)


def fde(rhs):
    """Wrap a right-hand side ``f`` into the mandatory ``G + f`` form."""
    return BinOp("+", Var(("G",)), rhs)


def is_fde_form(node):
    return isinstance(node, BinOp) and node.op == "+" and node.left == Var(("G",))


def walk(node):
    yield node
    if isinstance(node, Neg):
        yield from walk(node.operand)
    elif isinstance(node, BinOp):
        yield from walk(node.left)
        yield from walk(node.right)
    elif isinstance(node, Pow):
        yield from walk(node.base)


def factors(node):
    """Sorted set of factor names referenced anywhere in ``node``."""
    out = set()
    for n in walk(node):
        if isinstance(n, Var):
            out.update(n.factors)
    return sorted(out)


def size(node):
    return sum(1 for _ in walk(node))


# ---------------------------------------------------------------------------
# canonical infix string

_PREC = {"+": 1, "-": 1, "*": 2}


def format_number(value):
    value = float(value)
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def _prec(node):
    if isinstance(node, BinOp):
        return _PREC[node.op]
    if isinstance(node, Var) and len(node.factors) > 1:
        return 2
    if isinstance(node, Neg) or (isinstance(node, Const) and node.value < 0):
        # "-2*x" reads back as -(2*x), so a negative literal binds like a negation
        return 1
    return 4


def _negative_like(node):
    return isinstance(node, Neg) or (isinstance(node, Const) and node.value < 0)


def _factor_str(factor, time_suffix):
    name, lag = split_factor(factor)
    if not time_suffix:
        return factor
    return f"{name}(t_n)" if lag == 0 else f"{name}(t_n-{lag})"


def to_string(node, time_suffix=True):
    """Canonical infix rendering, e.g. ``G(t_n) - F_ch(t_n)*HR(t_n) + 3.6``."""
    if isinstance(node, Const):
        return format_number(node.value)
    if isinstance(node, Var):
        return "*".join(_factor_str(f, time_suffix) for f in node.factors)
    if isinstance(node, Pow):
        return f"pow({to_string(node.base, time_suffix)}, {node.exponent})"
    if isinstance(node, Neg):
        inner = to_string(node.operand, time_suffix)
        operand = node.operand
        if (isinstance(operand, BinOp) and operand.op != "*") or _negative_like(operand):
            inner = f"({inner})"
        return "-" + inner
    p = _PREC[node.op]
    left = to_string(node.left, time_suffix)
    if _prec(node.left) < p:
        left = f"({left})"
    right = to_string(node.right, time_suffix)
    rp = _prec(node.right)
    if rp < p or (rp == p and node.op == "-") or _negative_like(node.right):
        right = f"({right})"
    sym = {"+": " + ", "-": " - ", "*": "*"}[node.op]
    return f"{left}{sym}{right}"


# ---------------------------------------------------------------------------
# parser

_TOKEN_RE = re.compile(
    r"\s*(?:"
    r"(?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*(?:\(t_n(?:-\d+)?\)|\[t-\d+\])?)"
    r"|(?P<op>[-+*^(),])"
    r")"
)
_ALIASES = {"·": "*", "⋅": "*", "×": "*", "−": "-"}


def _tokenize(text):
    for a, b in _ALIASES.items():
        text = text.replace(a, b)
    pos, out = 0, []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m or m.end() == pos:
            raise ExpressionSyntaxError(f"unexpected character {text[pos:].strip()[:1]!r} at {pos}")
        pos = m.end()
        kind = m.lastgroup
        out.append((kind, m.group(kind)))
    return out


def _round15(x):
    return float(f"{x:.15g}")


class _Parser:
    def __init__(self, text, known):
        self.tokens = _tokenize(text)
        self.i = 0
        self.known = known

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else (None, None)

    def take(self, value=None):
        tok = self.peek()
        if tok[0] is None or (value is not None and tok[1] != value):
            raise ExpressionSyntaxError(f"expected {value or 'token'}, got {tok[1]!r}")
        self.i += 1
        return tok

    def parse(self):
        node = self.expr()
        if self.peek()[0] is not None:
            raise ExpressionSyntaxError(f"trailing input at {self.peek()[1]!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        # A leading minus negates the whole product: -a*b is Neg(a*b).
        if self.peek()[1] in ("-", "+"):
            sign = self.take()[1]
            operand = self.term()
            if sign == "+":
                return operand
            if isinstance(operand, Const):
                return Const(-operand.value)
            return Neg(operand)
        node = self.power()
        while self.peek()[1] == "*":
            self.take()
            right = self.unary()
            if isinstance(node, Var) and isinstance(right, Var):
                node = Var(node.factors + right.factors)
            else:
                node = BinOp("*", node, right)
        return node

    def unary(self):
        if self.peek()[1] == "-":
            self.take()
            operand = self.unary()
            if isinstance(operand, Const):
                return Const(-operand.value)
            return Neg(operand)
        if self.peek()[1] == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] == "^":
            self.take()
            return self._pow(base, self.unary())
        return base

    def _pow(self, base, exponent):
        if not isinstance(exponent, Const):
            raise ExpressionSyntaxError("exponent must be a number")
        if isinstance(base, Const):
            return Const(_round15(base.value ** exponent.value))
        if isinstance(base, Var) and float(exponent.value).is_integer():
            return Pow(base, int(exponent.value))
        raise ExpressionSyntaxError("pow() needs a variable or constant base and an integer exponent")

    def atom(self):
        kind, value = self.take()
        if kind == "num":
            return Const(float(value))
        if kind == "name":
            if value == "pow" and self.peek()[1] == "(":
                self.take("(")
                base = self.expr()
                self.take(",")
                exponent = self.expr()
                self.take(")")
                return self._pow(base, exponent)
            return Var((self._factor(value),))
        if value == "(":
            node = self.expr()
            self.take(")")
            return node
        raise ExpressionSyntaxError(f"unexpected token {value!r}")

    def _factor(self, token):
        m = re.match(r"^([A-Za-z_][A-Za-z_0-9]*)(?:\(t_n(?:-(\d+))?\)|\[t-(\d+)\])?$", token)
        name, lag = m.group(1), int(m.group(2) or m.group(3) or 0)
        if name not in self.known:
            raise ExpressionSyntaxError(f"unknown variable {name!r}")
        return lagged(name, lag)


def parse_expression(text, fold=False, known=VARIABLES):
    """Parse an infix expression. ``fold`` collapses constant-only products and sums."""
    node = _Parser(text, set(known)).parse()
    return fold_constants(node) if fold else node


def fold_constants(node):
    if isinstance(node, Neg):
        inner = fold_constants(node.operand)
        return Const(-inner.value) if isinstance(inner, Const) else Neg(inner)
    if isinstance(node, BinOp):
        left, right = fold_constants(node.left), fold_constants(node.right)
        if isinstance(left, Const) and isinstance(right, Const):
            a, b = left.value, right.value
            value = a + b if node.op == "+" else a - b if node.op == "-" else a * b
            return Const(_round15(value))
        return BinOp(node.op, left, right)
    return node


# ---------------------------------------------------------------------------
# JSON AST


def to_json(node):
    if isinstance(node, Const):
        return {"const": node.value}
    if isinstance(node, Var):
        return {"var": list(node.factors)}
    if isinstance(node, Neg):
        return {"neg": to_json(node.operand)}
    if isinstance(node, Pow):
        return {"pow": to_json(node.base), "exp": node.exponent}
    return {"op": node.op, "args": [to_json(node.left), to_json(node.right)]}


def from_json(obj):
    if "const" in obj:
        return Const(float(obj["const"]))
    if "var" in obj:
        return Var(tuple(obj["var"]))
    if "neg" in obj:
        return Neg(from_json(obj["neg"]))
    if "pow" in obj:
        return Pow(from_json(obj["pow"]), int(obj["exp"]))
    if obj.get("op") in _PREC:
        left, right = obj["args"]
        return BinOp(obj["op"], from_json(left), from_json(right))
    raise ExpressionSyntaxError(f"malformed expression node {obj!r}")


# ---------------------------------------------------------------------------
# evaluation


def evaluate(node, env):
    """Evaluate over scalars or numpy arrays. No error checking; see ``eval_checked``."""
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Var):
        out = env[node.factors[0]]
        for f in node.factors[1:]:
            out = out * env[f]
        return out
    if isinstance(node, Neg):
        return -evaluate(node.operand, env)
    if isinstance(node, Pow):
        base = evaluate(node.base, env)
        if node.exponent < 0:
            return 1.0 / base ** (-node.exponent)
        return base ** node.exponent
    a = evaluate(node.left, env)
    b = evaluate(node.right, env)
    if node.op == "+":
        return a + b
    if node.op == "-":
        return a - b
    return a * b


def eval_checked(node, env):
    """Scalar evaluation raising :class:`EvaluationError` on any non-finite step."""
    if isinstance(node, Const):
        return float(node.value)
    if isinstance(node, Pow):
        base = eval_checked(node.base, env)
        if base == 0.0 and node.exponent < 0:
            raise EvaluationError(f"zero raised to negative power in {to_string(node)}")
        with np.errstate(all="ignore"):
            value = float(np.float64(base) ** node.exponent)
    elif isinstance(node, Var):
        value = 1.0
        for f in node.factors:
            try:
                value = value * float(env[f])
            except KeyError:
                raise EvaluationError(f"unbound variable {f!r}") from None
    elif isinstance(node, Neg):
        value = -eval_checked(node.operand, env)
    else:
        a = eval_checked(node.left, env)
        b = eval_checked(node.right, env)
        value = a + b if node.op == "+" else a - b if node.op == "-" else a * b
    if not math.isfinite(value):
        raise EvaluationError(f"non-finite value in {to_string(node)}")
    return value


def _codegen(node, names):
    if isinstance(node, Const):
        return repr(float(node.value))
    if isinstance(node, Var):
        parts = []
        for f in node.factors:
            if f not in names:
                names[f] = f"x{len(names)}"
            parts.append(names[f])
        return "(" + "*".join(parts) + ")"
    if isinstance(node, Neg):
        return f"(-{_codegen(node.operand, names)})"
    if isinstance(node, Pow):
        base = _codegen(node.base, names)
        if node.exponent < 0:
            return f"(1.0/{base}**{-node.exponent})"
        return f"({base}**{node.exponent})"
    return f"({_codegen(node.left, names)}{node.op}{_codegen(node.right, names)})"


def compile_expression(node):
    """Compile to a Python callable taking a ``{factor: value}`` mapping.

    The callable is equivalent to :func:`evaluate` but avoids the tree walk,
    which matters inside the evolutionary loop.
    """
    names = {}
    body = _codegen(node, names)
    lines = ["def _f(env):"]
    lines += [f"    {v} = env[{k!r}]" for k, v in names.items()]
    lines.append(f"    return {body}")
    src = "\n".join(lines) + "\n"
    scope = {}
    exec(compile(src, "<expression>", "exec"), scope)
    fn = scope["_f"]
    fn.factors = tuple(names)
    return fn
