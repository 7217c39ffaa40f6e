"""Expression trees shared by structural equations, outcomes and option costs.

Values come in three kinds: ``sym`` (a symbolic range value), ``num`` and
``bool``.  Evaluation is vectorised over numpy arrays so a whole batch of
contexts can be solved at once; a scalar evaluation is just a batch of one.

Bare identifiers are resolved against the evaluation environment first.
Identifiers that are not bound there are symbol literals (``yes``, ``no``)
when symbols are allowed, and an error otherwise.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

SYM, NUM, BOOL = "sym", "num", "bool"

ARITH_OPS = ("+", "-", "*", "/")
ORDER_OPS = ("<", "<=", ">", ">=")
EQ_OPS = ("=", "!=")
LOGIC_OPS = ("and", "or")


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Bool:
    value: bool


@dataclass(frozen=True)
class Name:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str  # "-" or "not"
    operand: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class If:
    cond: "Expr"
    then: "Expr"
    orelse: "Expr"


@dataclass(frozen=True)
class Count:
    args: tuple["Expr", ...]


Expr = Union[Num, Bool, Name, Unary, Binary, If, Count]


class ExprError(Exception):
    """Type or binding error inside an expression; ``node`` is the culprit."""

    def __init__(self, message: str, node: Expr):
        super().__init__(message)
        self.node = node


# -- symbols ---------------------------------------------------------------

_symbol_codes: dict[str, int] = {}
_symbol_names: list[str] = []
_symbol_lock = threading.Lock()


def symbol_code(name: str) -> int:
    code = _symbol_codes.get(name)
    if code is None:
        with _symbol_lock:
            code = _symbol_codes.get(name)
            if code is None:
                code = len(_symbol_names)
                _symbol_names.append(name)
                _symbol_codes[name] = code
    return code


def symbol_name(code: int) -> str:
    return _symbol_names[int(code)]


# -- helpers ----------------------------------------------------------------


def names_in(expr: Expr) -> set[str]:
    """All identifiers appearing in ``expr``."""
    out: set[str] = set()
    stack = [expr]
    while stack:
        node = stack.pop()
        if isinstance(node, Name):
            out.add(node.name)
        elif isinstance(node, Unary):
            stack.append(node.operand)
        elif isinstance(node, Binary):
            stack.extend((node.left, node.right))
        elif isinstance(node, If):
            stack.extend((node.cond, node.then, node.orelse))
        elif isinstance(node, Count):
            stack.extend(node.args)
    return out


def substitute(expr: Expr, mapping: Mapping[str, Expr]) -> Expr:
    if isinstance(expr, Name):
        return mapping.get(expr.name, expr)
    if isinstance(expr, Unary):
        return Unary(expr.op, substitute(expr.operand, mapping))
    if isinstance(expr, Binary):
        return Binary(expr.op, substitute(expr.left, mapping), substitute(expr.right, mapping))
    if isinstance(expr, If):
        return If(
            substitute(expr.cond, mapping),
            substitute(expr.then, mapping),
            substitute(expr.orelse, mapping),
        )
    if isinstance(expr, Count):
        return Count(tuple(substitute(a, mapping) for a in expr.args))
    return expr


def event(var: str, value: str) -> Binary:
    """The primitive event ``var = value``."""
    return Binary("=", Name(var), Name(value))


def conj(*parts: Expr) -> Expr:
    out = parts[0]
    for p in parts[1:]:
        out = Binary("and", out, p)
    return out


def negate(expr: Expr) -> Expr:
    return Unary("not", expr)


# -- static typing ----------------------------------------------------------


def infer_kind(expr: Expr, bound: Mapping[str, str], symbols_ok: bool = True) -> str:
    """Static kind of ``expr``; raises :class:`ExprError` on a type error."""
    if isinstance(expr, Num):
        return NUM
    if isinstance(expr, Bool):
        return BOOL
    if isinstance(expr, Name):
        if expr.name in bound:
            return bound[expr.name]
        if symbols_ok:
            return SYM
        raise ExprError(f"unbound name {expr.name!r}", expr)
    if isinstance(expr, Unary):
        k = infer_kind(expr.operand, bound, symbols_ok)
        want = NUM if expr.op == "-" else BOOL
        if k != want:
            raise ExprError(f"operator {expr.op!r} expects {want}, got {k}", expr)
        return want
    if isinstance(expr, Binary):
        lk = infer_kind(expr.left, bound, symbols_ok)
        rk = infer_kind(expr.right, bound, symbols_ok)
        if expr.op in ARITH_OPS or expr.op in ORDER_OPS:
            if lk != NUM or rk != NUM:
                raise ExprError(f"operator {expr.op!r} expects numbers, got {lk} and {rk}", expr)
            return NUM if expr.op in ARITH_OPS else BOOL
        if expr.op in EQ_OPS:
            if lk != rk:
                raise ExprError(f"cannot compare {lk} with {rk}", expr)
            return BOOL
        if expr.op in LOGIC_OPS:
            if lk != BOOL or rk != BOOL:
                raise ExprError(f"operator {expr.op!r} expects booleans, got {lk} and {rk}", expr)
            return BOOL
        raise ExprError(f"unknown operator {expr.op!r}", expr)
    if isinstance(expr, If):
        if infer_kind(expr.cond, bound, symbols_ok) != BOOL:
            raise ExprError("if-condition must be boolean", expr.cond)
        tk = infer_kind(expr.then, bound, symbols_ok)
        ek = infer_kind(expr.orelse, bound, symbols_ok)
        if tk != ek:
            raise ExprError(f"if-branches disagree: {tk} vs {ek}", expr)
        return tk
    if isinstance(expr, Count):
        for a in expr.args:
            if infer_kind(a, bound, symbols_ok) != BOOL:
                raise ExprError("count() arguments must be boolean", a)
        return NUM
    raise ExprError(f"not an expression: {expr!r}", expr)


# -- evaluation -------------------------------------------------------------


def evaluate(expr: Expr, env: Mapping[str, tuple[str, object]], symbols_ok: bool = True):
    """Evaluate ``expr``; returns ``(kind, value)`` where value may be an array.

    ``env`` maps bound names to ``(kind, value)``; symbol values are integer
    codes from :func:`symbol_code`.
    """
    if isinstance(expr, Num):
        return NUM, expr.value
    if isinstance(expr, Bool):
        return BOOL, expr.value
    if isinstance(expr, Name):
        hit = env.get(expr.name)
        if hit is not None:
            return hit
        if symbols_ok:
            return SYM, symbol_code(expr.name)
        raise ExprError(f"unbound name {expr.name!r}", expr)
    if isinstance(expr, Unary):
        k, v = evaluate(expr.operand, env, symbols_ok)
        if expr.op == "-":
            if k != NUM:
                raise ExprError("unary minus expects a number", expr)
            return NUM, -np.asarray(v) if isinstance(v, np.ndarray) else -v
        if k != BOOL:
            raise ExprError("'not' expects a boolean", expr)
        return BOOL, np.logical_not(v)
    if isinstance(expr, Binary):
        op = expr.op
        lk, lv = evaluate(expr.left, env, symbols_ok)
        rk, rv = evaluate(expr.right, env, symbols_ok)
        if op in LOGIC_OPS:
            if lk != BOOL or rk != BOOL:
                raise ExprError(f"{op!r} expects booleans", expr)
            return BOOL, (np.logical_and(lv, rv) if op == "and" else np.logical_or(lv, rv))
        if op in EQ_OPS:
            if lk != rk:
                raise ExprError(f"cannot compare {lk} with {rk}", expr)
            return BOOL, (np.equal(lv, rv) if op == "=" else np.not_equal(lv, rv))
        if lk != NUM or rk != NUM:
            raise ExprError(f"{op!r} expects numbers", expr)
        if op == "+":
            return NUM, np.add(lv, rv)
        if op == "-":
            return NUM, np.subtract(lv, rv)
        if op == "*":
            return NUM, np.multiply(lv, rv)
        if op == "/":
            with np.errstate(divide="ignore", invalid="ignore"):
                return NUM, np.true_divide(lv, rv)
        if op == "<":
            return BOOL, np.less(lv, rv)
        if op == "<=":
            return BOOL, np.less_equal(lv, rv)
        if op == ">":
            return BOOL, np.greater(lv, rv)
        if op == ">=":
            return BOOL, np.greater_equal(lv, rv)
        raise ExprError(f"unknown operator {op!r}", expr)
    if isinstance(expr, If):
        ck, cv = evaluate(expr.cond, env, symbols_ok)
        if ck != BOOL:
            raise ExprError("if-condition must be boolean", expr.cond)
        tk, tv = evaluate(expr.then, env, symbols_ok)
        ek, ev = evaluate(expr.orelse, env, symbols_ok)
        if tk != ek:
            raise ExprError("if-branches disagree", expr)
        return tk, np.where(cv, tv, ev)
    if isinstance(expr, Count):
        total = 0
        for a in expr.args:
            k, v = evaluate(a, env, symbols_ok)
            if k != BOOL:
                raise ExprError("count() arguments must be boolean", a)
            total = np.add(total, np.asarray(v, dtype=np.int64))
        return NUM, total
    raise ExprError(f"not an expression: {expr!r}", expr)


def eval_number(expr: Expr, bindings: Mapping[str, float]) -> float:
    """Evaluate a purely numeric expression (costs, shift amounts)."""
    env = {k: (NUM, v) for k, v in bindings.items()}
    kind, value = evaluate(expr, env, symbols_ok=False)
    if kind != NUM:
        raise ExprError(f"expected a number, got {kind}", expr)
    return float(value)


# -- printing ---------------------------------------------------------------

_PREC = {"or": 1, "and": 2, "=": 4, "!=": 4, "<": 4, "<=": 4, ">": 4, ">=": 4,
         "+": 5, "-": 5, "*": 6, "/": 6}


def format_number(value: float) -> str:
    if isinstance(value, bool):
        raise TypeError("bool is not a number")
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if value == 0:
        return "0"  # folds negative zero, which compares equal anyway
    if np.isinf(value):
        return "inf" if value > 0 else "-inf"
    return np.format_float_positional(float(value), trim="-")


def _prec(expr: Expr) -> int:
    if isinstance(expr, Binary):
        return _PREC[expr.op]
    if isinstance(expr, Unary):
        return 3 if expr.op == "not" else 7
    if isinstance(expr, If):
        return 0
    return 8


def format_expr(expr: Expr) -> str:
    """Canonical source text for ``expr`` with minimal parentheses."""
    if isinstance(expr, Num):
        return format_number(expr.value)
    if isinstance(expr, Bool):
        return "true" if expr.value else "false"
    if isinstance(expr, Name):
        return expr.name
    if isinstance(expr, Count):
        return "count(" + ", ".join(format_expr(a) for a in expr.args) + ")"
    if isinstance(expr, If):
        return (f"if {format_expr(expr.cond)} then {format_expr(expr.then)} "
                f"else {format_expr(expr.orelse)}")
    if isinstance(expr, Unary):
        inner = format_expr(expr.operand)
        # a bare "-1" would read back as the literal -1, not as negation of 1
        literal = isinstance(expr.operand, Num) and expr.op == "-" and not inner.startswith("-")
        if _prec(expr.operand) < _prec(expr) or literal:
            inner = f"({inner})"
        return f"not {inner}" if expr.op == "not" else f"-{inner}"
    if isinstance(expr, Binary):
        p = _PREC[expr.op]
        left = format_expr(expr.left)
        right = format_expr(expr.right)
        # comparisons do not chain, so both sides need strictly higher precedence
        lp_need = p + 1 if p == 4 else p
        if _prec(expr.left) < lp_need:
            left = f"({left})"
        if _prec(expr.right) <= p:
            right = f"({right})"
        return f"{left} {expr.op} {right}"
    raise TypeError(f"not an expression: {expr!r}")
