"""Flat pre-order expression sequences.

An expression is a tuple of token ids in pre-order; arity alone determines
the tree, so validation is a single child-deficit walk. All transforms here
are pure and return new tuples; subtree operations work on half-open spans
into the flat buffer rather than on linked nodes.
"""
from __future__ import annotations

from typing import Iterable, Iterator, Sequence

from . import vocab
from .vocab import (
    CONST,
    InvalidToken,
    arity,
    is_const,
    is_literal,
    is_operator,
    is_variable,
    name_of,
    order_rank,
    token_from_name,
)

__all__ = [
    "PrefixExpr",
    "ExpressionError",
    "EmptyExpression",
    "UnderfullExpression",
    "OverfullExpression",
    "UnknownToken",
    "validate",
    "subtree_span",
    "child_spans",
    "parse_prefix",
    "format_prefix",
    "format_infix",
    "canonicalize",
    "compare_canonical",
    "prune_constants",
    "expand_integer_ops",
    "count_unique_variables",
    "count_constants",
    "length",
    "variable_set",
]

# Documentation alias: expressions are plain token tuples.
PrefixExpr = tuple


class ExpressionError(ValueError):
    """Base class for malformed expression sequences."""


class EmptyExpression(ExpressionError):
    pass


class UnderfullExpression(ExpressionError):
    """The walk ran out of tokens with children still owed."""


class OverfullExpression(ExpressionError):
    """The walk completed before consuming every token."""


class UnknownToken(ExpressionError):
    pass


# ---------------------------------------------------------------------------
# validation and navigation
# ---------------------------------------------------------------------------

def validate(tokens: Sequence[int]) -> tuple[int, ...]:
    """Return the expression iff the deficit walk ends at exactly zero.

    The walk starts owing one node; each token pays one and owes its arity.
    """
    if len(tokens) == 0:
        raise EmptyExpression("empty token sequence")
    deficit = 1
    last = len(tokens) - 1
    for i, tok in enumerate(tokens):
        try:
            deficit += arity(tok) - 1
        except InvalidToken as err:
            raise UnknownToken(f"at position {i}: {err}") from err
        if deficit == 0 and i != last:
            raise OverfullExpression(
                f"expression complete at token {i + 1} of {len(tokens)}")
    if deficit != 0:
        raise UnderfullExpression(f"{deficit} children missing at end")
    return tuple(tokens)


def subtree_span(expr: Sequence[int], index: int) -> tuple[int, int]:
    """Half-open [index, end) covering exactly the subtree rooted at index."""
    if not 0 <= index < len(expr):
        raise IndexError(f"index {index} outside expression of length {len(expr)}")
    deficit = 1
    i = index
    while deficit:
        deficit += arity(expr[i]) - 1
        i += 1
    return index, i


def child_spans(expr: Sequence[int], index: int) -> list[tuple[int, int]]:
    """Spans of the direct children of the node at index, left to right."""
    spans = []
    pos = index + 1
    for _ in range(arity(expr[index])):
        span = subtree_span(expr, pos)
        spans.append(span)
        pos = span[1]
    return spans


# ---------------------------------------------------------------------------
# text grammar
# ---------------------------------------------------------------------------

def parse_prefix(text: str) -> tuple[int, ...]:
    """Whitespace-separated token names; round-trips with format_prefix."""
    names = text.split()
    tokens = []
    for name in names:
        try:
            tokens.append(token_from_name(name))
        except InvalidToken as err:
            raise UnknownToken(str(err)) from None
    return validate(tokens)


def format_prefix(expr: Sequence[int]) -> str:
    return " ".join(name_of(t) for t in expr)


def format_infix(expr: Sequence[int]) -> str:
    """Fully parenthesized display form; the placeholder prints as c."""
    def fmt(index: int) -> tuple[str, int]:
        tok = expr[index]
        if is_const(tok):
            return "c", index + 1
        if is_variable(tok) or is_literal(tok):
            return name_of(tok), index + 1
        info = vocab.properties(tok)
        if info.arity == 2:
            left, mid = fmt(index + 1)
            right, end = fmt(mid)
            if info.name == "pow":
                return f"({left}^{right})", end
            return f"({left} {info.name} {right})", end
        inner, end = fmt(index + 1)
        name = info.name
        if name == "neg":
            return f"(-{inner})", end
        if name == "inv":
            return f"(1 / {inner})", end
        if name.startswith("pow1_"):
            return f"({inner}^(1/{name[5:]}))", end
        if name.startswith("pow"):
            return f"({inner}^{name[3:]})", end
        if info.fold is not None:
            kind, k = info.fold
            if kind == "mult":
                return f"({k} * {inner})", end
            return f"({inner} / {k})", end
        return f"{name}({inner})", end

    text, end = fmt(0)
    if end != len(expr):
        raise OverfullExpression("trailing tokens after root subtree")
    return text


# ---------------------------------------------------------------------------
# canonical ordering
# ---------------------------------------------------------------------------

def canonicalize(expr: Sequence[int]) -> tuple[int, ...]:
    """Sort operands of commutative operators by the canonical subtree order.

    Children are canonicalized first, then compared lexicographically over
    their token streams under the total token order; idempotent.
    """
    def canon(index: int) -> tuple[tuple[int, ...], int]:
        tok = expr[index]
        k = arity(tok)
        if k == 0:
            return (tok,), index + 1
        if k == 1:
            inner, end = canon(index + 1)
            return (tok,) + inner, end
        left, mid = canon(index + 1)
        right, end = canon(mid)
        if vocab.OPERATORS[tok].commutative and _rank_key(right) < _rank_key(left):
            left, right = right, left
        return (tok,) + left + right, end

    out, end = canon(0)
    if end != len(expr):
        raise OverfullExpression("trailing tokens after root subtree")
    return out


def _rank_key(tokens: Sequence[int]) -> tuple[int, ...]:
    return tuple(order_rank(t) for t in tokens)


def canonical_key(tokens: Sequence[int]) -> tuple[int, ...]:
    """Sort key realizing the canonical token order over whole streams."""
    return _rank_key(tokens)


def compare_canonical(a: Sequence[int], b: Sequence[int]) -> int:
    """-1/0/1 comparison of token streams under the canonical token order."""
    ka, kb = _rank_key(a), _rank_key(b)
    return (ka > kb) - (ka < kb)


# ---------------------------------------------------------------------------
# structural transforms
# ---------------------------------------------------------------------------

def prune_constants(expr: Sequence[int]) -> tuple[int, ...]:
    """Remove every placeholder leaf; collapse parents that lose children.

    A unary parent of a pruned child prunes too; a binary parent is replaced
    by its surviving child. An all-placeholder expression prunes to [0].
    """
    def prune(index: int) -> tuple[tuple[int, ...] | None, int]:
        tok = expr[index]
        k = arity(tok)
        if k == 0:
            if is_const(tok):
                return None, index + 1
            return (tok,), index + 1
        if k == 1:
            inner, end = prune(index + 1)
            return (None if inner is None else (tok,) + inner), end
        left, mid = prune(index + 1)
        right, end = prune(mid)
        if left is None and right is None:
            return None, end
        if left is None:
            return right, end
        if right is None:
            return left, end
        return (tok,) + left + right, end

    out, _ = prune(0)
    if out is None:
        return (vocab.LIT_ZERO,)
    return out


_MUL = vocab.op_id("*")


def expand_integer_ops(expr: Sequence[int]) -> tuple[int, ...]:
    """Rewrite every mult-k / div-k node as a multiplication by a fresh
    placeholder; the division direction is absorbed into the free constant."""
    out: list[int] = []
    for tok in expr:
        if is_operator(tok) and vocab.OPERATORS[tok].fold is not None:
            out.append(_MUL)
            out.append(CONST)
        else:
            out.append(tok)
    return tuple(out)


# ---------------------------------------------------------------------------
# counts
# ---------------------------------------------------------------------------

def count_unique_variables(expr: Sequence[int]) -> int:
    return len(variable_set(expr))


def variable_set(expr: Sequence[int]) -> frozenset[int]:
    return frozenset(t for t in expr if is_variable(t))


def count_constants(expr: Sequence[int]) -> int:
    return sum(1 for t in expr if is_const(t))


def length(expr: Sequence[int]) -> int:
    return len(expr)
