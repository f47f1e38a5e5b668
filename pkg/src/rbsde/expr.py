"""Small arithmetic expression language for drivers, barriers and payoffs.

Grammar (whitespace-insensitive, ASCII only)::

    expr    := term (("+" | "-") term)*
    term    := unary (("*" | "/") unary)*
    unary   := "-" unary | power
    power   := atom ("^" unary)?
    atom    := NUMBER | NAME | NAME "(" expr ("," expr)* ")" | "(" expr ")"
    NUMBER  := DIGITS ["." DIGITS] [("e" | "E") ["+" | "-"] DIGITS]
             | "." DIGITS [exponent]
    NAME    := one of t, y, z, x  (variables)
             | abs, min, max, exp, log, sqrt, pos, sin, cos  (functions)

``^`` binds tighter than unary minus, so ``-x^2`` is ``-(x^2)``; ``^`` is
right associative, the other binary operators are left associative.

Evaluation works on floats and on numpy arrays alike.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

VARIABLES = frozenset({"t", "y", "z", "x"})
FUNCTIONS = {
    "abs": 1,
    "min": 2,
    "max": 2,
    "exp": 1,
    "log": 1,
    "sqrt": 1,
    "pos": 1,
    "sin": 1,
    "cos": 1,
}


class ExprError(Exception):
    """Base class for every expression error."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class UnknownIdentifier(ExprError):
    pass


class UnboundVariable(ExprError):
    pass


class DomainError(ExprError):
    pass


# --- AST -------------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple


Expr = Union[Num, Var, Neg, BinOp, Call]


# --- tokenizer -------------------------------------------------------------

_PUNCT = set("+-*/^(),")


@dataclass(frozen=True)
class _Token:
    kind: str  # "num", "name", "op", "eof"
    text: str
    offset: int


def _tokenize(source: str) -> list[_Token]:
    tokens = []
    i = 0
    n = len(source)
    byte_offset = 0
    while i < n:
        ch = source[i]
        if ord(ch) > 127:
            raise ExprSyntaxError(f"non-ASCII character {ch!r}", byte_offset)
        if ch.isspace():
            i += 1
            byte_offset += 1
            continue
        start = i
        if ch.isdigit() or (ch == "." and i + 1 < n and source[i + 1].isdigit()):
            while i < n and source[i].isdigit():
                i += 1
            if i < n and source[i] == ".":
                i += 1
                while i < n and source[i].isdigit():
                    i += 1
            if i < n and source[i] in "eE":
                j = i + 1
                if j < n and source[j] in "+-":
                    j += 1
                if j < n and source[j].isdigit():
                    i = j
                    while i < n and source[i].isdigit():
                        i += 1
                else:
                    raise ExprSyntaxError("malformed exponent, expected digits", byte_offset + (j - start))
            tokens.append(_Token("num", source[start:i], byte_offset))
        elif ch.isalpha() or ch == "_":
            while i < n and (source[i].isalnum() or source[i] == "_") and ord(source[i]) < 128:
                i += 1
            tokens.append(_Token("name", source[start:i], byte_offset))
        elif ch in _PUNCT:
            i += 1
            tokens.append(_Token("op", ch, byte_offset))
        else:
            raise ExprSyntaxError(f"unexpected character {ch!r}", byte_offset)
        byte_offset += i - start
    tokens.append(_Token("eof", "", byte_offset))
    return tokens


# --- parser ----------------------------------------------------------------


class _Parser:
    def __init__(self, source: str):
        self.tokens = _tokenize(source)
        self.pos = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.pos]

    def _advance(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def _at(self, text: str) -> bool:
        return self.tok.kind == "op" and self.tok.text == text

    def _expect(self, text: str) -> None:
        if not self._at(text):
            found = self.tok.text or "end of input"
            raise ExprSyntaxError(f"expected '{text}', found '{found}'", self.tok.offset)
        self._advance()

    def parse(self) -> Expr:
        e = self.expr()
        if self.tok.kind != "eof":
            raise ExprSyntaxError(f"expected operator or end of input, found '{self.tok.text}'", self.tok.offset)
        return e

    def expr(self) -> Expr:
        left = self.term()
        while self._at("+") or self._at("-"):
            op = self._advance().text
            left = BinOp(op, left, self.term())
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self._at("*") or self._at("/"):
            op = self._advance().text
            left = BinOp(op, left, self.unary())
        return left

    def unary(self) -> Expr:
        if self._at("-"):
            self._advance()
            return Neg(self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self._at("^"):
            self._advance()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Expr:
        tok = self.tok
        if tok.kind == "num":
            self._advance()
            value = float(tok.text)
            if not np.isfinite(value):
                raise ExprSyntaxError(f"numeric literal '{tok.text}' overflows", tok.offset)
            return Num(value)
        if tok.kind == "name":
            self._advance()
            if self._at("("):
                if tok.text not in FUNCTIONS:
                    raise UnknownIdentifier(f"unknown function '{tok.text}' at byte offset {tok.offset}")
                self._advance()
                args = [self.expr()]
                while self._at(","):
                    self._advance()
                    args.append(self.expr())
                arity = FUNCTIONS[tok.text]
                if len(args) != arity:
                    raise ExprSyntaxError(
                        f"function '{tok.text}' expects {arity} argument(s), got {len(args)}", tok.offset
                    )
                self._expect(")")
                return Call(tok.text, tuple(args))
            if tok.text in FUNCTIONS:
                raise ExprSyntaxError(f"expected '(' after function '{tok.text}'", self.tok.offset)
            if tok.text not in VARIABLES:
                raise UnknownIdentifier(f"unknown variable '{tok.text}' at byte offset {tok.offset}")
            return Var(tok.text)
        if self._at("("):
            self._advance()
            e = self.expr()
            self._expect(")")
            return e
        found = tok.text or "end of input"
        raise ExprSyntaxError(f"expected number, variable, function or '(', found '{found}'", tok.offset)


def parse(source: str) -> Expr:
    return _Parser(source).parse()


# --- evaluation ------------------------------------------------------------


def _check_domain(cond, message: str) -> None:
    if np.any(cond):
        raise DomainError(message)


def _call(func: str, args: list):
    if func == "abs":
        return np.abs(args[0])
    if func == "min":
        return np.minimum(args[0], args[1])
    if func == "max":
        return np.maximum(args[0], args[1])
    if func == "pos":
        return np.maximum(args[0], 0.0)
    if func == "exp":
        return np.exp(args[0])
    if func == "log":
        _check_domain(np.asarray(args[0]) <= 0, "log of a non-positive argument")
        return np.log(args[0])
    if func == "sqrt":
        _check_domain(np.asarray(args[0]) < 0, "sqrt of a negative argument")
        return np.sqrt(args[0])
    if func == "sin":
        return np.sin(args[0])
    if func == "cos":
        return np.cos(args[0])
    raise UnknownIdentifier(f"unknown function '{func}'")


def _eval(e: Expr, env: Mapping):
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        try:
            return env[e.name]
        except KeyError:
            raise UnboundVariable(f"variable '{e.name}' is not bound") from None
    if isinstance(e, Neg):
        return -_eval(e.operand, env)
    if isinstance(e, Call):
        return _call(e.func, [_eval(a, env) for a in e.args])
    a = _eval(e.left, env)
    b = _eval(e.right, env)
    if e.op == "+":
        return a + b
    if e.op == "-":
        return a - b
    if e.op == "*":
        return a * b
    if e.op == "/":
        _check_domain(np.asarray(b) == 0, "division by zero")
        return a / b
    # "^"
    base = np.asarray(a, dtype=float)
    expo = np.asarray(b, dtype=float)
    _check_domain((base == 0) & (expo < 0), "zero raised to a negative power")
    _check_domain((base < 0) & (expo != np.round(expo)), "negative base with non-integer exponent")
    with np.errstate(over="ignore"):
        out = np.power(base, expo)
    return out if out.ndim else float(out)


def evaluate(e: Expr, env: Mapping):
    """Evaluate ``e`` under ``env``; scalars give a float, arrays broadcast."""
    with np.errstate(over="ignore"):
        out = _eval(e, env)
    if np.ndim(out) == 0:
        return float(out)
    return np.asarray(out, dtype=float)


def free_vars(e: Expr) -> set[str]:
    if isinstance(e, Num):
        return set()
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, Neg):
        return free_vars(e.operand)
    if isinstance(e, Call):
        out: set[str] = set()
        for a in e.args:
            out |= free_vars(a)
        return out
    return free_vars(e.left) | free_vars(e.right)


# --- printing --------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}
_NEG_PREC = 3
_POW_PREC = 4
_ATOM_PREC = 5


def _prec(e: Expr) -> int:
    if isinstance(e, BinOp):
        return _POW_PREC if e.op == "^" else _PREC[e.op]
    if isinstance(e, Neg):
        return _NEG_PREC
    return _ATOM_PREC


def _wrap(e: Expr, min_prec: int) -> str:
    s = to_source(e)
    return f"({s})" if _prec(e) < min_prec else s


def to_source(e: Expr) -> str:
    """Render ``e`` with the minimal parentheses needed to reparse it exactly."""
    if isinstance(e, Num):
        return repr(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return "-" + _wrap(e.operand, _NEG_PREC)
    if isinstance(e, Call):
        return f"{e.func}({', '.join(to_source(a) for a in e.args)})"
    if e.op == "^":
        return f"{_wrap(e.left, _ATOM_PREC)}^{_wrap(e.right, _NEG_PREC)}"
    p = _PREC[e.op]
    return f"{_wrap(e.left, p)} {e.op} {_wrap(e.right, p + 1)}"


def compile_expr(source: str, allowed: set[str] | frozenset[str], role: str = "expression"):
    """Parse ``source`` and enforce that its free variables lie in ``allowed``."""
    e = parse(source)
    extra = free_vars(e) - set(allowed)
    if extra:
        raise UnknownIdentifier(
            f"{role} may only reference {sorted(allowed)}, found {sorted(extra)}"
        )
    return e
