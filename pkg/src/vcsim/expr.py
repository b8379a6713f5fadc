"""Tiny expression language for data-driven tool output derivations.

Manifests describe output attributes as strings like::

    "args.width"
    "0.06 * len(args.text)"
    "sum(videos.duration)"
    "args.shots * args.shot_duration"

Grammar (usual precedence, ``*`` binds tighter than ``+``/``-``)::

    expr   := term (("+" | "-") term)*
    term   := unary ("*" unary)*
    unary  := "-" unary | atom
    atom   := NUMBER | "len" "(" ref ")" | "sum" "(" ref ")" | ref | "(" expr ")"
    ref    := NAME "." NAME        # args.<param> or <asset_param>.<attribute>

``args.x`` reads a numeric argument. ``len(args.x)`` is the length of a
string (or list) argument. ``p.attr`` reads an attribute of the first asset
bound to asset parameter ``p``; ``sum(p.attr)`` sums the attribute over all
assets bound to ``p``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Sequence, Union


class ExprError(ValueError):
    """Raised for unparseable expressions or invalid evaluation contexts."""


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class ArgRef:
    name: str


@dataclass(frozen=True)
class LenRef:
    name: str


@dataclass(frozen=True)
class InputRef:
    param: str
    attr: str


@dataclass(frozen=True)
class SumRef:
    param: str
    attr: str


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


Expr = Union[Num, ArgRef, LenRef, InputRef, SumRef, Neg, BinOp]

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d+)?)|(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<sym>[()+\-*.]))"
)


def _tokenize(text: str) -> list[tuple[str, str]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ExprError(f"unexpected character {text[pos]!r} at offset {pos}")
        if m.group("num") is not None:
            tokens.append(("num", m.group("num")))
        elif m.group("name") is not None:
            tokens.append(("name", m.group("name")))
        else:
            tokens.append(("sym", m.group("sym")))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, tokens: list[tuple[str, str]], text: str):
        self.tokens = tokens
        self.text = text
        self.i = 0

    def peek(self) -> tuple[str, str] | None:
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def take(self) -> tuple[str, str]:
        tok = self.peek()
        if tok is None:
            raise ExprError(f"unexpected end of expression: {self.text!r}")
        self.i += 1
        return tok

    def expect_sym(self, sym: str) -> None:
        tok = self.take()
        if tok != ("sym", sym):
            raise ExprError(f"expected {sym!r} in {self.text!r}, got {tok[1]!r}")

    def parse(self) -> Expr:
        node = self.expr()
        if self.peek() is not None:
            raise ExprError(f"trailing tokens in {self.text!r}")
        return node

    def expr(self) -> Expr:
        node = self.term()
        while self.peek() in (("sym", "+"), ("sym", "-")):
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.peek() == ("sym", "*"):
            self.take()
            node = BinOp("*", node, self.unary())
        return node

    def unary(self) -> Expr:
        if self.peek() == ("sym", "-"):
            self.take()
            return Neg(self.unary())
        return self.atom()

    def atom(self) -> Expr:
        tok = self.take()
        if tok[0] == "num":
            return Num(float(tok[1]))
        if tok == ("sym", "("):
            node = self.expr()
            self.expect_sym(")")
            return node
        if tok[0] == "name":
            name = tok[1]
            if name in ("len", "sum") and self.peek() == ("sym", "("):
                self.take()
                ref = self.ref()
                self.expect_sym(")")
                if name == "len":
                    if not isinstance(ref, ArgRef):
                        raise ExprError("len() takes an args.<param> reference")
                    return LenRef(ref.name)
                if not isinstance(ref, InputRef):
                    raise ExprError("sum() takes an <asset_param>.<attr> reference")
                return SumRef(ref.param, ref.attr)
            return self.ref(first=name)
        raise ExprError(f"unexpected token {tok[1]!r} in {self.text!r}")

    def ref(self, first: str | None = None) -> Expr:
        if first is None:
            tok = self.take()
            if tok[0] != "name":
                raise ExprError(f"expected a reference in {self.text!r}")
            first = tok[1]
        self.expect_sym(".")
        tok = self.take()
        if tok[0] != "name":
            raise ExprError(f"expected an attribute name in {self.text!r}")
        if first == "args":
            return ArgRef(tok[1])
        return InputRef(first, tok[1])


def parse_expr(text: str) -> Expr:
    if not isinstance(text, str) or not text.strip():
        raise ExprError("empty expression")
    return _Parser(_tokenize(text), text).parse()


def arg_refs(expr: Expr) -> set[str]:
    """Names of all ``args.*`` parameters the expression reads."""
    out: set[str] = set()
    _walk(expr, out, set())
    return out


def input_refs(expr: Expr) -> set[str]:
    """Names of all asset parameters the expression reads attributes from."""
    out: set[str] = set()
    _walk(expr, set(), out)
    return out


def _walk(expr: Expr, args_out: set[str], inputs_out: set[str]) -> None:
    if isinstance(expr, (ArgRef, LenRef)):
        args_out.add(expr.name)
    elif isinstance(expr, (InputRef, SumRef)):
        inputs_out.add(expr.param)
    elif isinstance(expr, Neg):
        _walk(expr.operand, args_out, inputs_out)
    elif isinstance(expr, BinOp):
        _walk(expr.left, args_out, inputs_out)
        _walk(expr.right, args_out, inputs_out)


def evaluate(
    expr: Expr,
    args: Mapping[str, object],
    inputs: Mapping[str, Sequence[object]] | None = None,
) -> float:
    """Evaluate against resolved arguments and bound input assets.

    ``inputs`` maps asset parameter names to the assets they resolved to;
    assets must expose ``attribute(name)`` returning a number or ``None``.
    """
    inputs = inputs or {}
    if isinstance(expr, Num):
        return expr.value
    if isinstance(expr, ArgRef):
        value = _arg(args, expr.name)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ExprError(f"args.{expr.name} is not numeric")
        return float(value)
    if isinstance(expr, LenRef):
        value = _arg(args, expr.name)
        if not isinstance(value, (str, list, tuple)):
            raise ExprError(f"len(args.{expr.name}) needs a string or list")
        return float(len(value))
    if isinstance(expr, InputRef):
        assets = _assets(inputs, expr.param)
        return _attr(assets[0], expr.param, expr.attr)
    if isinstance(expr, SumRef):
        assets = _assets(inputs, expr.param)
        return sum(_attr(a, expr.param, expr.attr) for a in assets)
    if isinstance(expr, Neg):
        return -evaluate(expr.operand, args, inputs)
    if isinstance(expr, BinOp):
        left = evaluate(expr.left, args, inputs)
        right = evaluate(expr.right, args, inputs)
        if expr.op == "+":
            return left + right
        if expr.op == "-":
            return left - right
        return left * right
    raise ExprError(f"unknown expression node: {expr!r}")


def _arg(args: Mapping[str, object], name: str) -> object:
    if name not in args:
        raise ExprError(f"args.{name} is not bound")
    return args[name]


def _assets(inputs: Mapping[str, Sequence[object]], param: str) -> Sequence[object]:
    assets = inputs.get(param)
    if not assets:
        raise ExprError(f"asset parameter {param!r} resolved to no assets")
    return assets


def _attr(asset: object, param: str, attr: str) -> float:
    value = asset.attribute(attr)  # type: ignore[attr-defined]
    if value is None:
        raise ExprError(f"asset bound to {param!r} has no attribute {attr!r}")
    return float(value)
