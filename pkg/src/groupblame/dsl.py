"""The ``.blame`` scenario format: lexer, recursive-descent parser, serializer.

A file is a sequence of line-oriented declarations::

    scenario committee_a1
    focal a1
    agents a1, a2, a3
    param N = 5000
    exogenous U2 : {yes, no} ~ bernoulli(yes: 0.6)
    endogenous A2 : {yes, no} = U2
    endogenous Pass : {yes, no} = if count(A1 = yes, A2 = yes) >= 2 then yes else no
    action A2 -> a2
    outcome Pass = no
    option pressure(n in 1..3) { cost = n * 100; shift U2.yes += n * 0.05; }

Parsing never raises on bad input; problems come back as :class:`Diagnostic`
objects with a stable code and a source span.  The parser resynchronises at
the next declaration keyword that starts a line, so one run reports every
independent error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from groupblame.blame import (
    COALITION_SIZE,
    SIZE_SYMBOL,
    SOCIETY,
    OptionTemplate,
    Scenario,
    SetAction,
    SetMarginal,
    ShiftMarginal,
    natural_key,
    validate_scenario,
)
from groupblame.causal import (
    ENDOGENOUS,
    EXOGENOUS,
    CausalModel,
    CausalSetting,
    Signature,
    StructuralEquation,
    Variable,
    validate_model,
)
from groupblame.epistemics import ExplicitState, FactoredState
from groupblame.errors import InvalidState, ScenarioError, SerializationError
from groupblame.expressions import (
    BOOL,
    NUM,
    SYM,
    Binary,
    Bool,
    Count,
    Expr,
    ExprError,
    If,
    Name,
    Num,
    Unary,
    format_expr,
    format_number,
    infer_kind,
    names_in,
)

TOP_LEVEL = frozenset({
    "scenario", "focal", "agents", "param", "baseline", "rule", "exogenous",
    "endogenous", "action", "outcome", "context", "option",
})
KEYWORDS = TOP_LEVEL | frozenset({
    "requires", "cost", "shift", "marginal", "set", "if", "then", "else", "count",
    "and", "or", "not", "true", "false", "in", "inf", "bernoulli", "categorical",
})
RULES = {"focal_counts_toward_n"}
MAX_DEPTH = 200

# stable diagnostic codes
E_CHAR = "E101"
E_UTF8 = "E102"
E_TOKEN = "E201"
E_EOF = "E202"
E_DEPTH = "E203"
E_UNBOUND = "E301"
E_UNKNOWN_VAR = "E302"
E_UNKNOWN_AGENT = "E303"
E_RANGE = "E304"
E_PROB = "E305"
E_DUPLICATE = "E306"
E_MISSING = "E307"
E_MODEL = "E308"
E_TYPE = "E309"
E_SIZE = "E310"
E_ACTION = "E311"
E_BALANCE = "E312"
E_RULE = "E313"
E_DIST = "E314"
E_CONTEXT = "E315"
E_EFFECT = "E316"
E_RESERVED = "E317"
E_SCENARIO = "E318"
W_NO_ACTION = "W401"


@dataclass(frozen=True)
class SourceSpan:
    line: int
    column: int
    offset: int
    length: int

    def __str__(self) -> str:
        return f"{self.line}:{self.column}"


@dataclass(frozen=True)
class Diagnostic:
    severity: str
    code: str
    message: str
    span: SourceSpan

    def __str__(self) -> str:
        return f"{self.span}: {self.severity} {self.code}: {self.message}"


@dataclass(frozen=True)
class Token:
    kind: str  # ident, number, op, eof
    text: str
    span: SourceSpan


class _Abort(Exception):
    pass


# -- lexer ------------------------------------------------------------------

_OPERATORS = ("+=", "-=", "->", "..", "!=", "<=", ">=",
              "{", "}", "(", ")", ",", ":", ";", ".", "~", "=", "<", ">", "+", "-", "*", "/")


def tokenize(text: str) -> tuple[list[Token], list[Diagnostic], set[int]]:
    """Tokens, lexical diagnostics and the indices of tokens that start a line."""
    tokens: list[Token] = []
    diags: list[Diagnostic] = []
    line_starts: set[int] = set()
    i, line, col, byte = 0, 1, 1, 0
    fresh_line = True
    n = len(text)

    def advance(k: int) -> None:
        nonlocal i, col, byte
        for ch in text[i:i + k]:
            byte += len(ch.encode("utf-8", "surrogatepass"))
        i += k
        col += k

    while i < n:
        ch = text[i]
        if ch == "\n":
            advance(1)
            line += 1
            col = 1
            fresh_line = True
            continue
        if ch in " \t\r\f\v":
            advance(1)
            continue
        if ch == "#":
            while i < n and text[i] != "\n":
                advance(1)
            continue
        start = (line, col, byte, i)
        if ch.isascii() and (ch.isalpha() or ch == "_"):
            j = i + 1
            while j < n and text[j].isascii() and (text[j].isalnum() or text[j] == "_"):
                j += 1
            kind, word = "ident", text[i:j]
        elif ch.isascii() and ch.isdigit():
            j = i + 1
            while j < n and text[j].isascii() and text[j].isdigit():
                j += 1
            if j + 1 < n and text[j] == "." and text[j + 1].isascii() and text[j + 1].isdigit():
                j += 1
                while j < n and text[j].isascii() and text[j].isdigit():
                    j += 1
            kind, word = "number", text[i:j]
        else:
            word = next((op for op in _OPERATORS if text.startswith(op, i)), None)
            kind = "op"
            if word is None:
                span = SourceSpan(line, col, byte, len(ch.encode("utf-8", "surrogatepass")))
                diags.append(Diagnostic("error", E_CHAR, f"unexpected character {ch!r}", span))
                advance(1)
                continue
        advance(len(word))
        span = SourceSpan(start[0], start[1], start[2], byte - start[2])
        if fresh_line:
            line_starts.add(len(tokens))
            fresh_line = False
        tokens.append(Token(kind, word, span))
    tokens.append(Token("eof", "", SourceSpan(line, col, byte, 0)))
    line_starts.add(len(tokens) - 1)
    return tokens, diags, line_starts


# -- declarations -----------------------------------------------------------


@dataclass
class _VarDecl:
    name: str
    kind: str
    values: list[tuple[str, SourceSpan]]
    span: SourceSpan
    dist: list | None = None  # [(value, value_span, Expr)] ; "bernoulli" flag below
    bernoulli: bool = False
    dist_span: SourceSpan | None = None
    body: Expr | None = None


@dataclass
class _EffectDecl:
    kind: str  # shift | marginal | set
    var: str
    var_span: SourceSpan
    value: str | None = None
    value_span: SourceSpan | None = None
    expr: Expr | None = None
    dist: list | None = None
    bernoulli: bool = False
    span: SourceSpan | None = None


@dataclass
class _OptionDecl:
    name: str
    span: SourceSpan
    size: tuple[int, int] | None = None
    size_span: SourceSpan | None = None
    requires: list[tuple[str, SourceSpan]] = field(default_factory=list)
    cost: Expr | None = None
    cost_span: SourceSpan | None = None
    effects: list[_EffectDecl] = field(default_factory=list)


@dataclass
class _File:
    header: tuple[str, SourceSpan] | None = None
    focal: tuple[str, SourceSpan] | None = None
    agents: list[tuple[str, SourceSpan]] = field(default_factory=list)
    agents_span: SourceSpan | None = None
    params: dict[str, tuple[float, SourceSpan]] = field(default_factory=dict)
    baseline: tuple[Expr, SourceSpan] | None = None
    rules: dict[str, tuple[bool, SourceSpan]] = field(default_factory=dict)
    variables: dict[str, _VarDecl] = field(default_factory=dict)
    actions: list[tuple[str, SourceSpan, str, SourceSpan]] = field(default_factory=list)
    outcome: tuple[Expr, SourceSpan] | None = None
    contexts: list[tuple[float, SourceSpan, list[tuple[str, SourceSpan, str, SourceSpan]]]] = \
        field(default_factory=list)
    options: list[_OptionDecl] = field(default_factory=list)


# -- parser -----------------------------------------------------------------


class _Parser:
    def __init__(self, text: str):
        self.tokens, self.diags, self.line_starts = tokenize(text)
        self.pos = 0
        self.spans: dict[int, SourceSpan] = {}
        self.file = _File()
        self.depth = 0

    # token helpers

    @property
    def tok(self) -> Token:
        return self.tokens[self.pos]

    def peek(self, k: int = 1) -> Token:
        return self.tokens[min(self.pos + k, len(self.tokens) - 1)]

    def next(self) -> Token:
        t = self.tok
        if t.kind != "eof":
            self.pos += 1
        return t

    def error(self, code: str, message: str, span: SourceSpan) -> None:
        self.diags.append(Diagnostic("error", code, message, span))

    def fail(self, expected: str) -> None:
        t = self.tok
        if t.kind == "eof":
            self.error(E_EOF, f"unexpected end of input, expected {expected}", t.span)
        else:
            self.error(E_TOKEN, f"unexpected {t.text!r}, expected {expected}", t.span)
        raise _Abort

    def at(self, text: str) -> bool:
        t = self.tok
        return t.kind in ("op", "ident") and t.text == text

    def accept(self, text: str) -> Token | None:
        if self.at(text):
            return self.next()
        return None

    def expect(self, text: str) -> Token:
        if not self.at(text):
            self.fail(repr(text))
        return self.next()

    def ident(self, what: str = "a name") -> Token:
        t = self.tok
        if t.kind != "ident" or t.text in KEYWORDS:
            self.fail(what)
        return self.next()

    def number(self) -> tuple[float, SourceSpan]:
        t = self.tok
        sign = 1
        start = t.span
        if t.kind == "op" and t.text == "-":
            sign = -1
            self.next()
            t = self.tok
        if t.kind == "ident" and t.text == "inf":
            self.next()
            return sign * math.inf, _join(start, t.span)
        if t.kind != "number":
            self.fail("a number")
        self.next()
        value = int(t.text) if "." not in t.text else float(t.text)
        return sign * value, _join(start, t.span)

    def integer(self) -> tuple[int, SourceSpan]:
        t = self.tok
        if t.kind != "number" or "." in t.text:
            self.fail("an integer")
        self.next()
        return int(t.text), t.span

    def recover(self) -> None:
        self.next()
        while self.tok.kind != "eof":
            if self.pos in self.line_starts and self.tok.kind == "ident" and self.tok.text in TOP_LEVEL:
                return
            self.next()

    # grammar

    def parse(self) -> _File:
        while self.tok.kind != "eof":
            start = self.pos
            try:
                self.statement()
            except _Abort:
                if self.pos == start or self.tok.kind != "eof":
                    self.recover()
            except RecursionError:
                self.error(E_DEPTH, "expression nested too deeply", self.tok.span)
                self.recover()
        return self.file

    def statement(self) -> None:
        t = self.tok
        if t.kind != "ident" or t.text not in TOP_LEVEL:
            self.fail("a declaration keyword")
        getattr(self, "s_" + t.text)()

    def s_scenario(self) -> None:
        kw = self.next()
        name = self.ident("a scenario name")
        if self.file.header is not None:
            self.error(E_DUPLICATE, "scenario header given twice", kw.span)
        else:
            self.file.header = (name.text, name.span)

    def s_focal(self) -> None:
        kw = self.next()
        name = self.ident("an agent name or 'society'")
        if self.file.focal is not None:
            self.error(E_DUPLICATE, "focal declared twice", kw.span)
        else:
            self.file.focal = (name.text, name.span)

    def s_agents(self) -> None:
        kw = self.next()
        if self.file.agents_span is not None:
            self.error(E_DUPLICATE, "agents declared twice", kw.span)
        self.file.agents_span = kw.span
        names = [self.ident("an agent name")]
        while self.accept(","):
            names.append(self.ident("an agent name"))
        seen = {a for a, _ in self.file.agents}
        for t in names:
            if t.text in seen:
                self.error(E_DUPLICATE, f"agent {t.text!r} listed twice", t.span)
                continue
            seen.add(t.text)
            self.file.agents.append((t.text, t.span))

    def s_param(self) -> None:
        self.next()
        name = self.ident("a parameter name")
        self.expect("=")
        value, span = self.number()
        if name.text in (SIZE_SYMBOL, COALITION_SIZE):
            self.error(E_RESERVED, f"{name.text!r} is reserved and cannot be a parameter", name.span)
        elif name.text in self.file.params:
            self.error(E_DUPLICATE, f"parameter {name.text!r} given twice", name.span)
        else:
            self.file.params[name.text] = (value, name.span)

    def s_baseline(self) -> None:
        kw = self.next()
        self.expect("cost")
        self.expect("=")
        expr, span = self.expr_with_span()
        if self.file.baseline is not None:
            self.error(E_DUPLICATE, "baseline cost given twice", kw.span)
        else:
            self.file.baseline = (expr, span)

    def s_rule(self) -> None:
        self.next()
        name = self.ident("a rule name")
        self.expect("=")
        t = self.tok
        if not (t.kind == "ident" and t.text in ("true", "false")):
            self.fail("'true' or 'false'")
        self.next()
        if name.text not in RULES:
            self.error(E_RULE, f"unknown rule {name.text!r} (known: {', '.join(sorted(RULES))})",
                       name.span)
        elif name.text in self.file.rules:
            self.error(E_DUPLICATE, f"rule {name.text!r} given twice", name.span)
        else:
            self.file.rules[name.text] = (t.text == "true", name.span)

    def value_range(self) -> list[tuple[str, SourceSpan]]:
        self.expect("{")
        values = [self.ident("a range value")]
        while self.accept(","):
            values.append(self.ident("a range value"))
        self.expect("}")
        return [(v.text, v.span) for v in values]

    def distribution(self, numeric_only: bool):
        t = self.tok
        if not (t.kind == "ident" and t.text in ("bernoulli", "categorical")):
            self.fail("'bernoulli' or 'categorical'")
        self.next()
        self.expect("(")
        entries = []
        while True:
            v = self.ident("a range value")
            self.expect(":")
            if numeric_only:
                p, span = self.number()
                entries.append((v.text, v.span, Num(p), span))
            else:
                e, span = self.expr_with_span()
                entries.append((v.text, v.span, e, span))
            if not self.accept(","):
                break
        close = self.expect(")")
        if t.text == "bernoulli" and len(entries) != 1:
            self.error(E_DIST, "bernoulli takes exactly one value: probability", t.span)
        return entries, t.text == "bernoulli", _join(t.span, close.span)

    def _declare(self, decl: _VarDecl) -> None:
        if decl.name in self.file.variables:
            self.error(E_DUPLICATE, f"variable {decl.name!r} declared twice", decl.span)
            return
        self.file.variables[decl.name] = decl

    def s_exogenous(self) -> None:
        self.next()
        name = self.ident("a variable name")
        self.expect(":")
        values = self.value_range()
        decl = _VarDecl(name.text, EXOGENOUS, values, name.span)
        if self.accept("~"):
            decl.dist, decl.bernoulli, decl.dist_span = self.distribution(numeric_only=True)
        self._declare(decl)

    def s_endogenous(self) -> None:
        self.next()
        name = self.ident("a variable name")
        self.expect(":")
        values = self.value_range()
        self.expect("=")
        body = self.expr()
        decl = _VarDecl(name.text, ENDOGENOUS, values, name.span, body=body)
        self._declare(decl)

    def s_action(self) -> None:
        self.next()
        var = self.ident("an action variable")
        self.expect("->")
        agent = self.ident("an agent name")
        self.file.actions.append((var.text, var.span, agent.text, agent.span))

    def s_outcome(self) -> None:
        kw = self.next()
        expr, span = self.expr_with_span()
        if self.file.outcome is not None:
            self.error(E_DUPLICATE, "outcome given twice", kw.span)
        else:
            self.file.outcome = (expr, span)

    def s_context(self) -> None:
        self.next()
        weight, wspan = self.number()
        self.expect(":")
        items = []
        while True:
            var = self.ident("a variable name")
            self.expect("=")
            value = self.ident("a range value")
            items.append((var.text, var.span, value.text, value.span))
            if not self.accept(","):
                break
        self.file.contexts.append((weight, wspan, items))

    def s_option(self) -> None:
        self.next()
        name = self.ident("an option name")
        opt = _OptionDecl(name.text, name.span)
        if self.accept("("):
            sym = self.ident("the size parameter")
            if sym.text != SIZE_SYMBOL:
                self.error(E_SIZE, f"the size parameter must be named {SIZE_SYMBOL!r}", sym.span)
            self.expect("in")
            lo, lspan = self.integer()
            self.expect("..")
            hi, hspan = self.integer()
            self.expect(")")
            opt.size = (lo, hi)
            opt.size_span = _join(lspan, hspan)
            if lo > hi:
                self.error(E_SIZE, f"empty size range {lo}..{hi}", opt.size_span)
        self.expect("{")
        # register early so recovery inside the body still knows the option exists
        self.file.options.append(opt)
        while not self.at("}"):
            if self.tok.kind == "eof":
                self.fail("'}'")
            self.option_statement(opt)
            self.accept(";")
        self.expect("}")

    def option_statement(self, opt: _OptionDecl) -> None:
        t = self.tok
        word = t.text if t.kind == "ident" else None
        if word == "requires":
            self.next()
            agents = [self.ident("an agent name")]
            while self.accept(","):
                agents.append(self.ident("an agent name"))
            opt.requires.extend((a.text, a.span) for a in agents)
        elif word == "cost":
            self.next()
            self.expect("=")
            expr, span = self.expr_with_span()
            if opt.cost is not None:
                self.error(E_DUPLICATE, f"option {opt.name!r} has two costs", t.span)
            else:
                opt.cost, opt.cost_span = expr, span
        elif word == "shift":
            self.next()
            var = self.ident("a variable name")
            self.expect(".")
            value = self.ident("a range value")
            if self.accept("+="):
                expr = self.expr()
            elif self.accept("-="):
                expr = self.negated(self.expr())
            else:
                self.fail("'+=' or '-='")
            opt.effects.append(_EffectDecl("shift", var.text, var.span, value.text, value.span,
                                           expr=expr, span=t.span))
        elif word == "marginal":
            self.next()
            var = self.ident("a variable name")
            self.expect("~")
            dist, bern, span = self.distribution(numeric_only=False)
            opt.effects.append(_EffectDecl("marginal", var.text, var.span, dist=dist,
                                           bernoulli=bern, span=span))
        elif word == "set":
            self.next()
            var = self.ident("an action variable")
            self.expect("=")
            value = self.ident("a range value")
            opt.effects.append(_EffectDecl("set", var.text, var.span, value.text, value.span,
                                           span=t.span))
        else:
            self.fail("'requires', 'cost', 'shift', 'marginal' or 'set'")

    def negated(self, expr: Expr) -> Expr:
        if isinstance(expr, Num):
            out = Num(-expr.value)
        else:
            out = Unary("-", expr)
        self.spans[id(out)] = self.spans.get(id(expr), self.tok.span)
        return out

    # expressions

    def node(self, expr: Expr, span: SourceSpan) -> Expr:
        self.spans[id(expr)] = span
        return expr

    def span_of(self, expr: Expr) -> SourceSpan:
        return self.spans[id(expr)]

    def expr_with_span(self) -> tuple[Expr, SourceSpan]:
        e = self.expr()
        return e, self.span_of(e)

    def expr(self) -> Expr:
        self.depth += 1
        try:
            if self.depth > MAX_DEPTH:
                self.error(E_DEPTH, "expression nested too deeply", self.tok.span)
                raise _Abort
            if self.at("if"):
                kw = self.next()
                cond = self.expr()
                self.expect("then")
                then = self.expr()
                self.expect("else")
                orelse = self.expr()
                return self.node(If(cond, then, orelse), _join(kw.span, self.span_of(orelse)))
            return self.or_expr()
        finally:
            self.depth -= 1

    def _binary_chain(self, ops: tuple[str, ...], operand) -> Expr:
        left = operand()
        while self.tok.kind in ("op", "ident") and self.tok.text in ops:
            op = self.next().text
            right = operand()
            left = self.node(Binary(op, left, right), _join(self.span_of(left), self.span_of(right)))
        return left

    def or_expr(self) -> Expr:
        return self._binary_chain(("or",), self.and_expr)

    def and_expr(self) -> Expr:
        return self._binary_chain(("and",), self.not_expr)

    def not_expr(self) -> Expr:
        if self.at("not"):
            kw = self.next()
            self.depth += 1
            try:
                if self.depth > MAX_DEPTH:
                    self.error(E_DEPTH, "expression nested too deeply", kw.span)
                    raise _Abort
                operand = self.not_expr()
            finally:
                self.depth -= 1
            return self.node(Unary("not", operand), _join(kw.span, self.span_of(operand)))
        return self.comparison()

    def comparison(self) -> Expr:
        left = self.additive()
        if self.tok.kind == "op" and self.tok.text in ("=", "!=", "<", "<=", ">", ">="):
            op = self.next().text
            right = self.additive()
            return self.node(Binary(op, left, right), _join(self.span_of(left), self.span_of(right)))
        return left

    def additive(self) -> Expr:
        return self._binary_chain(("+", "-"), self.multiplicative)

    def multiplicative(self) -> Expr:
        return self._binary_chain(("*", "/"), self.unary)

    def unary(self) -> Expr:
        if self.at("-"):
            minus = self.next()
            t = self.tok
            if t.kind == "number":
                self.next()
                value = int(t.text) if "." not in t.text else float(t.text)
                return self.node(Num(-value), _join(minus.span, t.span))
            if t.kind == "ident" and t.text == "inf":
                self.next()
                return self.node(Num(-math.inf), _join(minus.span, t.span))
            self.depth += 1
            try:
                if self.depth > MAX_DEPTH:
                    self.error(E_DEPTH, "expression nested too deeply", minus.span)
                    raise _Abort
                operand = self.unary()
            finally:
                self.depth -= 1
            return self.node(Unary("-", operand), _join(minus.span, self.span_of(operand)))
        return self.primary()

    def primary(self) -> Expr:
        t = self.tok
        if t.kind == "number":
            self.next()
            return self.node(Num(int(t.text) if "." not in t.text else float(t.text)), t.span)
        if t.kind == "ident":
            if t.text == "inf":
                self.next()
                return self.node(Num(math.inf), t.span)
            if t.text in ("true", "false"):
                self.next()
                return self.node(Bool(t.text == "true"), t.span)
            if t.text == "count":
                self.next()
                self.expect("(")
                args = [self.expr()]
                while self.accept(","):
                    args.append(self.expr())
                close = self.expect(")")
                return self.node(Count(tuple(args)), _join(t.span, close.span))
            if t.text == "if":
                return self.expr()
            if t.text not in KEYWORDS:
                self.next()
                return self.node(Name(t.text), t.span)
        if t.kind == "op" and t.text == "(":
            self.next()
            inner = self.expr()
            self.expect(")")
            return inner
        self.fail("an expression")
        raise AssertionError("unreachable")


def _join(a: SourceSpan, b: SourceSpan) -> SourceSpan:
    if b.offset < a.offset:
        a, b = b, a
    return SourceSpan(a.line, a.column, a.offset, b.offset + b.length - a.offset)


# -- semantic analysis ------------------------------------------------------


class _Builder:
    def __init__(self, parser: _Parser):
        self.p = parser
        self.f = parser.file
        self.diags = parser.diags
        self.anchor = self._anchor()

    def _anchor(self) -> SourceSpan:
        if self.f.header:
            return self.f.header[1]
        return self.p.tokens[0].span

    def error(self, code: str, message: str, span: SourceSpan | None) -> None:
        self.diags.append(Diagnostic("error", code, message, span or self.anchor))

    def span(self, expr: Expr) -> SourceSpan:
        return self.p.spans.get(id(expr), self.anchor)

    def find_name(self, expr: Expr, name: str) -> SourceSpan:
        stack = [expr]
        while stack:
            node = stack.pop()
            if isinstance(node, Name) and node.name == name:
                return self.span(node)
            for child in _children(node):
                stack.append(child)
        return self.span(expr)

    def check_numeric(self, expr: Expr, bound: set[str], where: str) -> bool:
        ok = True
        for unknown in sorted(names_in(expr) - bound):
            ok = False
            self.error(E_UNBOUND, f"unbound name {unknown!r} in {where}", self.find_name(expr, unknown))
        if ok:
            try:
                kind = infer_kind(expr, {b: NUM for b in bound}, symbols_ok=False)
            except ExprError as exc:
                self.error(E_TYPE, f"{exc} in {where}", self.span(exc.node))
                return False
            if kind != NUM:
                self.error(E_TYPE, f"{where} must be a number, not {kind}", self.span(expr))
                return False
        return ok

    def build(self) -> Scenario | None:
        f = self.f
        if f.header is None:
            self.error(E_MISSING, "missing 'scenario <name>' header", self.p.tokens[0].span)
        if not f.agents:
            self.error(E_MISSING, "missing 'agents' declaration", self.anchor)
        if "N" not in f.params:
            self.error(E_MISSING, "missing balance parameter 'param N = ...'", self.anchor)
        if f.outcome is None:
            self.error(E_MISSING, "missing 'outcome' declaration", self.anchor)
        agents = {a for a, _ in f.agents}
        params = {k: v for k, (v, _) in f.params.items()}

        variables = f.variables
        exo = [d for d in variables.values() if d.kind == EXOGENOUS]
        endo = [d for d in variables.values() if d.kind == ENDOGENOUS]
        if not exo:
            self.error(E_MISSING, "at least one exogenous variable is required", self.anchor)
        if not endo:
            self.error(E_MISSING, "at least one endogenous variable is required", self.anchor)
        range_values = set()
        for d in variables.values():
            seen = set()
            for v, span in d.values:
                if v in seen:
                    self.error(E_DUPLICATE, f"value {v!r} repeated in the range of {d.name}", span)
                seen.add(v)
                range_values.add(v)
                if v in variables:
                    self.error(E_MODEL, f"{v!r} is both a variable and a range value", span)

        # names inside equations and the outcome
        for d in endo:
            for name in sorted(names_in(d.body) - set(variables) - range_values):
                self.error(E_UNKNOWN_VAR, f"unknown name {name!r} in the equation for {d.name}",
                           self.find_name(d.body, name))
        if f.outcome is not None:
            expr = f.outcome[0]
            for name in sorted(names_in(expr) - set(variables) - range_values):
                self.error(E_UNKNOWN_VAR, f"unknown name {name!r} in the outcome",
                           self.find_name(expr, name))
            if not names_in(expr) - set(variables) - range_values:
                try:
                    kind = infer_kind(expr, {v: SYM for v in variables})
                    if kind != BOOL:
                        self.error(E_TYPE, "the outcome must be a boolean formula", f.outcome[1])
                except ExprError as exc:
                    self.error(E_TYPE, str(exc), self.span(exc.node))
                self._check_events(expr)

        agent_of: dict[str, str] = {}
        owner: dict[str, str] = {}
        for var, vspan, agent, aspan in f.actions:
            d = variables.get(var)
            if d is None:
                self.error(E_UNKNOWN_VAR, f"unknown action variable {var!r}", vspan)
                continue
            if d.kind != ENDOGENOUS:
                self.error(E_ACTION, f"action {var!r} must be endogenous", vspan)
                continue
            if agent not in agents:
                self.error(E_UNKNOWN_AGENT, f"unknown agent {agent!r}", aspan)
                continue
            if var in agent_of:
                self.error(E_DUPLICATE, f"action {var!r} assigned twice", vspan)
                continue
            if agent in owner:
                self.error(E_ACTION, f"agent {agent!r} already owns action {owner[agent]!r}", aspan)
                continue
            agent_of[var] = agent
            owner[agent] = var

        focal = SOCIETY
        if f.focal is not None:
            focal = f.focal[0]
            if focal != SOCIETY and focal not in agents:
                self.error(E_UNKNOWN_AGENT, f"unknown focal agent {focal!r}", f.focal[1])

        baseline = Num(0)
        if f.baseline is not None:
            baseline = f.baseline[0]
            self.check_numeric(baseline, set(params) | {COALITION_SIZE}, "the baseline cost")

        if any(d.severity == "error" for d in self.diags):
            return None

        model = CausalModel(
            Signature(
                tuple(Variable(d.name, EXOGENOUS, tuple(v for v, _ in d.values)) for d in exo),
                tuple(Variable(d.name, ENDOGENOUS, tuple(v for v, _ in d.values)) for d in endo),
                agent_of,
            ),
            tuple(StructuralEquation(d.name, d.body) for d in endo),
        )
        for finding in validate_model(model).findings:
            target = finding.variables[0] if finding.variables else None
            span = variables[target].span if target in variables else self.anchor
            self.error(E_MODEL, f"{finding.category}: {finding.message}", span)
        if any(d.severity == "error" for d in self.diags):
            return None

        state = self.build_state(model)
        menu = [t for t in (self.build_option(o, model, agents, set(params)) for o in f.options)]
        if state is None or any(d.severity == "error" for d in self.diags):
            return None

        scenario = Scenario(
            name=f.header[0],
            agents=tuple(a for a, _ in f.agents),
            base_state=state,
            outcome=f.outcome[0],
            menu=tuple(menu),
            balance=params["N"],
            baseline_cost=baseline,
            params={k: v for k, v in params.items() if k != "N"},
            focal=focal,
            focal_counts_toward_n=f.rules.get("focal_counts_toward_n", (True, None))[0],
        )
        for finding in validate_scenario(scenario):
            code = {"balance_too_small": E_BALANCE, "bad_balance": E_BALANCE}.get(
                finding.category, E_SCENARIO)
            span = f.params["N"][1] if code == E_BALANCE else self._option_span(finding)
            self.error(code, f"{finding.category}: {finding.message}", span)
        if any(d.severity == "error" for d in self.diags):
            return None
        for agent, span in f.agents:
            if agent not in owner:
                self.diags.append(Diagnostic("warning", W_NO_ACTION,
                                             f"agent {agent!r} has no action variable", span))
        return scenario

    def _option_span(self, finding) -> SourceSpan:
        for o in self.f.options:
            if finding.variables and o.name == finding.variables[0]:
                return o.span
        return self.anchor

    def _check_events(self, expr: Expr) -> None:
        variables = self.f.variables
        stack = [expr]
        while stack:
            node = stack.pop()
            if isinstance(node, Binary) and node.op in ("=", "!="):
                l, r = node.left, node.right
                for var_side, val_side in ((l, r), (r, l)):
                    if (isinstance(var_side, Name) and var_side.name in variables
                            and isinstance(val_side, Name) and val_side.name not in variables):
                        allowed = {v for v, _ in variables[var_side.name].values}
                        if val_side.name not in allowed:
                            self.error(E_RANGE, f"{val_side.name!r} is not in the range of "
                                       f"{var_side.name}", self.span(val_side))
            stack.extend(_children(node))

    def _dist(self, decl_name: str, values: list[str], entries, bernoulli: bool,
              numeric: bool, bound: set[str]):
        out: dict[str, Expr] = {}
        for value, vspan, expr, espan in entries:
            if value not in values:
                self.error(E_RANGE, f"{value!r} is not in the range of {decl_name}", vspan)
                continue
            if value in out:
                self.error(E_DUPLICATE, f"{value!r} given twice", vspan)
                continue
            if not numeric:
                self.check_numeric(expr, bound, "a probability")
            out[value] = expr
        if bernoulli:
            if len(values) != 2:
                self.error(E_DIST, f"bernoulli needs a two-valued range; {decl_name} has "
                           f"{len(values)} values", entries[0][1] if entries else self.anchor)
                return None
            if len(out) == 1:
                (value, expr), = out.items()
                other = values[1] if value == values[0] else values[0]
                out[other] = Binary("-", Num(1), expr) if not isinstance(expr, Num) else Num(1 - expr.value)
        return out

    def build_state(self, model: CausalModel):
        f = self.f
        exo = [d for d in f.variables.values() if d.kind == EXOGENOUS]
        with_dist = [d for d in exo if d.dist is not None]
        if f.contexts:
            for d in with_dist:
                self.error(E_DIST, f"{d.name} has a distribution but the state is given by contexts",
                           d.dist_span)
            if with_dist:
                return None
            settings = []
            for weight, wspan, items in f.contexts:
                ctx = {}
                bad = False
                for var, vspan, value, valspan in items:
                    d = f.variables.get(var)
                    if d is None or d.kind != EXOGENOUS:
                        self.error(E_UNKNOWN_VAR, f"{var!r} is not an exogenous variable", vspan)
                        bad = True
                    elif value not in {v for v, _ in d.values}:
                        self.error(E_RANGE, f"{value!r} is not in the range of {var}", valspan)
                        bad = True
                    elif var in ctx:
                        self.error(E_DUPLICATE, f"{var} assigned twice in one context", vspan)
                        bad = True
                    else:
                        ctx[var] = value
                missing = [d.name for d in exo if d.name not in ctx]
                if missing and not bad:
                    self.error(E_CONTEXT, f"context leaves {', '.join(missing)} unassigned", wspan)
                    bad = True
                if not (0 <= weight <= 1):
                    self.error(E_PROB, f"context weight {weight!r} outside [0, 1]", wspan)
                    bad = True
                if not bad:
                    settings.append((CausalSetting(model, ctx), float(weight)))
            if len(settings) != len(f.contexts):
                return None
            try:
                return ExplicitState(tuple(settings))
            except InvalidState as exc:
                self.error(E_PROB, str(exc), f.contexts[0][1])
                return None
        marginals = {}
        for d in exo:
            if d.dist is None:
                self.error(E_DIST, f"exogenous {d.name} has no distribution (use '~ bernoulli(...)')",
                           d.span)
                continue
            values = [v for v, _ in d.values]
            dist = self._dist(d.name, values, d.dist, d.bernoulli, True, set())
            if dist is None:
                continue
            probs = {v: float(e.value) for v, e in dist.items()}
            bad = [v for v, p in probs.items() if not (0.0 <= p <= 1.0)]
            if bad:
                self.error(E_PROB, f"P({d.name}={bad[0]}) outside [0, 1]", d.dist_span)
                continue
            if abs(math.fsum(probs.values()) - 1.0) > 1e-9:
                self.error(E_PROB, f"distribution of {d.name} does not sum to 1", d.dist_span)
                continue
            marginals[d.name] = probs
        if len(marginals) != len(exo):
            return None
        return FactoredState(model, marginals)

    def build_option(self, o: _OptionDecl, model: CausalModel, agents: set[str],
                     params: set[str]) -> OptionTemplate | None:
        if sum(1 for other in self.f.options if other.name == o.name) > 1 and \
                next(x for x in self.f.options if x.name == o.name) is not o:
            self.error(E_DUPLICATE, f"option {o.name!r} declared twice", o.span)
        bound = params | ({SIZE_SYMBOL} if o.size is not None else set())
        if o.cost is None:
            self.error(E_MISSING, f"option {o.name!r} has no cost", o.span)
        else:
            self.check_numeric(o.cost, bound, f"the cost of {o.name}")
        required = set()
        for agent, span in o.requires:
            if agent not in agents:
                self.error(E_UNKNOWN_AGENT, f"unknown agent {agent!r}", span)
            required.add(agent)
        variables = model.signature.variables
        effects = []
        for e in o.effects:
            var = variables.get(e.var)
            if var is None:
                self.error(E_UNKNOWN_VAR, f"unknown variable {e.var!r}", e.var_span)
                continue
            if e.kind == "set":
                if e.var not in model.signature.agent_of:
                    self.error(E_EFFECT, f"'set' needs an action variable; {e.var} is not one",
                               e.var_span)
                elif e.value not in var.range:
                    self.error(E_RANGE, f"{e.value!r} is not in the range of {e.var}", e.value_span)
                else:
                    effects.append(SetAction(e.var, e.value))
                continue
            if var.kind != EXOGENOUS:
                self.error(E_EFFECT, f"'{e.kind}' needs an exogenous variable; {e.var} is endogenous",
                           e.var_span)
                continue
            if e.kind == "shift":
                if e.value not in var.range:
                    self.error(E_RANGE, f"{e.value!r} is not in the range of {e.var}", e.value_span)
                    continue
                if self.check_numeric(e.expr, bound, "a shift amount"):
                    effects.append(ShiftMarginal(e.var, e.value, e.expr))
            else:
                dist = self._dist(e.var, list(var.range), e.dist, e.bernoulli, False, bound)
                if dist is not None:
                    effects.append(SetMarginal(e.var, {v: dist[v] for v in var.range if v in dist}))
        if o.cost is None:
            return None
        return OptionTemplate(o.name, o.cost, tuple(effects), o.size, frozenset(required))


def _children(node: Expr):
    if isinstance(node, Unary):
        return (node.operand,)
    if isinstance(node, Binary):
        return (node.left, node.right)
    if isinstance(node, If):
        return (node.cond, node.then, node.orelse)
    if isinstance(node, Count):
        return node.args
    return ()


# -- public API -------------------------------------------------------------


def parse_with_diagnostics(text: str | bytes) -> tuple[Scenario | None, list[Diagnostic]]:
    """Parse scenario source; returns the scenario (or None) and all diagnostics."""
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            line = bytes(text[:exc.start]).count(b"\n") + 1
            col = exc.start - (bytes(text[:exc.start]).rfind(b"\n") + 1) + 1
            span = SourceSpan(line, col, exc.start, max(1, exc.end - exc.start))
            return None, [Diagnostic("error", E_UTF8, "input is not valid UTF-8", span)]
    if text.startswith("﻿"):
        text = text[1:]
    parser = _Parser(text)
    parser.parse()
    builder = _Builder(parser)
    if any(d.severity == "error" for d in parser.diags):
        # still report missing sections so a single run is informative
        return None, _sorted(parser.diags)
    try:
        scenario = builder.build()
    except RecursionError:
        builder.error(E_DEPTH, "expression nested too deeply", builder.anchor)
        scenario = None
    if any(d.severity == "error" for d in builder.diags):
        return None, _sorted(builder.diags)
    return scenario, _sorted(builder.diags)


def _sorted(diags: list[Diagnostic]) -> list[Diagnostic]:
    return sorted(diags, key=lambda d: (d.span.offset, d.code))


def parse(text: str | bytes) -> Scenario | list[Diagnostic]:
    """A :class:`Scenario` on success, otherwise the list of diagnostics."""
    scenario, diags = parse_with_diagnostics(text)
    if scenario is None:
        return diags
    return scenario


# -- serializer -------------------------------------------------------------


def _range(values) -> str:
    return "{" + ", ".join(values) + "}"


def _is_complement(p, q) -> bool:
    if isinstance(p, Num) and isinstance(q, Num):
        p, q = p.value, q.value
    if isinstance(p, (int, float)) and isinstance(q, (int, float)):
        return q == 1 - p
    return q == Binary("-", Num(1), p)


def _format_dist(values, dist: dict, fmt) -> str:
    if len(values) == 2 and all(v in dist for v in values) and _is_complement(*(dist[v] for v in values)):
        return f"bernoulli({values[0]}: {fmt(dist[values[0]])})"
    return "categorical(" + ", ".join(f"{v}: {fmt(dist[v])}" for v in values if v in dist) + ")"


def _format_delta(expr: Expr) -> str:
    if isinstance(expr, Num) and (expr.value < 0 or (expr.value == 0 and math.copysign(1, expr.value) < 0)):
        return "-= " + format_number(-expr.value)
    if isinstance(expr, Unary) and expr.op == "-":
        return "-= " + format_expr(expr.operand)
    return "+= " + format_expr(expr)


def serialize(scenario: Scenario) -> str:
    """Canonical text for ``scenario``; ``parse(serialize(s)) == s``."""
    state = scenario.base_state
    if isinstance(state, FactoredState):
        model = state.model
    else:
        model = state.reference_model
        if any(s.model != model for s, _ in state.settings):
            raise SerializationError("explicit states whose settings use different models "
                                     "cannot be written as text")
    sig = model.signature
    lines = [f"scenario {scenario.name}"]
    lines.append(f"focal {scenario.focal}")
    lines.append("agents " + ", ".join(sorted(scenario.agents, key=natural_key)))
    lines.append(f"param N = {format_number(scenario.balance)}")
    for name in sorted(scenario.params):
        lines.append(f"param {name} = {format_number(scenario.params[name])}")
    lines.append(f"baseline cost = {format_expr(scenario.baseline_cost)}")
    if not scenario.focal_counts_toward_n:
        lines.append("rule focal_counts_toward_n = false")
    lines.append("")
    for var in sig.exogenous:
        text = f"exogenous {var.name} : {_range(var.range)}"
        if isinstance(state, FactoredState):
            text += " ~ " + _format_dist(var.range, state.marginals[var.name], format_number)
        lines.append(text)
    for var in sig.endogenous:
        lines.append(f"endogenous {var.name} : {_range(var.range)} = "
                     f"{format_expr(model.equation_for[var.name])}")
    for action, agent in sorted(sig.agent_of.items(), key=lambda kv: natural_key(kv[1])):
        lines.append(f"action {action} -> {agent}")
    lines.append(f"outcome {format_expr(scenario.outcome)}")
    if isinstance(state, ExplicitState):
        lines.append("")
        for setting, weight in state.settings:
            items = ", ".join(f"{v.name} = {setting.context[v.name]}" for v in sig.exogenous)
            lines.append(f"context {format_number(weight)} : {items}")
    lines.append("")
    lines.append("# options")
    for t in scenario.menu:
        head = f"option {t.name}"
        if t.size is not None:
            head += f"({SIZE_SYMBOL} in {t.size[0]}..{t.size[1]})"
        lines.append(head + " {")
        if t.required_agents:
            lines.append("  requires " + ", ".join(sorted(t.required_agents, key=natural_key)) + ";")
        lines.append(f"  cost = {format_expr(t.cost)};")
        for e in t.effects:
            if isinstance(e, ShiftMarginal):
                lines.append(f"  shift {e.var}.{e.value} {_format_delta(e.delta)};")
            elif isinstance(e, SetMarginal):
                var = sig.variables[e.var]
                lines.append(f"  marginal {e.var} ~ {_format_dist(var.range, dict(e.dist), format_expr)};")
            else:
                lines.append(f"  set {e.var} = {e.value};")
        lines.append("}")
    return "\n".join(lines) + "\n"


def fingerprint(scenario: Scenario) -> str:
    import hashlib

    return hashlib.sha256(serialize(scenario).encode("utf-8")).hexdigest()


def parse_expression(text: str) -> Expr:
    """Parse a standalone expression such as ``Pass = yes``."""
    parser = _Parser(text)
    expr = None
    try:
        expr = parser.expr()
        if parser.tok.kind != "eof":
            parser.fail("end of expression")
    except _Abort:
        pass
    except RecursionError:
        parser.error(E_DEPTH, "expression nested too deeply", parser.tok.span)
    if parser.diags or expr is None:
        raise ScenarioError("; ".join(str(d) for d in parser.diags) or "empty expression")
    return expr
