"""Prefix stream validation, spans, parsing, and canonical ordering."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prenorm import vocab as V
from prenorm import expr as E

from .oracles import oracle_eval, random_expr


def toks(text: str) -> tuple[int, ...]:
    return E.parse_prefix(text)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def test_validate_accepts_simple_forms():
    for text in ("x1", "C", "pi", "+ x1 x2", "neg neg x1", "+ pow2 div2 x1 C"):
        E.validate(toks(text))  # must not raise


def test_validate_empty():
    with pytest.raises(E.EmptyExpression):
        E.validate(())


def test_validate_underfull_reports_position():
    with pytest.raises(E.UnderfullExpression):
        E.validate((V.op_id("+"), V.variable(1)))
    with pytest.raises(E.UnderfullExpression):
        E.validate((V.op_id("neg"),))


def test_validate_overfull_reports_position():
    with pytest.raises(E.OverfullExpression) as err:
        E.validate((V.variable(1), V.variable(1)))
    assert "1" in str(err.value)


def test_validate_unknown_token():
    with pytest.raises(E.UnknownToken):
        E.validate((V.op_id("+"), 39, V.variable(1)))


@given(st.integers(0, 8), st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_validate_random_trees_and_proper_prefixes(n_ops, seed):
    rng = np.random.default_rng(seed)
    e = random_expr(rng, n_ops, n_vars=3)
    E.validate(e)
    if len(e) > 1:
        with pytest.raises(E.UnderfullExpression):
            E.validate(e[:-1])


# ---------------------------------------------------------------------------
# spans
# ---------------------------------------------------------------------------

def test_subtree_span_and_children():
    e = toks("+ pow2 x1 C")
    assert E.subtree_span(e, 0) == (0, 4)
    assert E.subtree_span(e, 1) == (1, 3)
    assert E.subtree_span(e, 2) == (2, 3)
    assert E.child_spans(e, 0) == [(1, 3), (3, 4)]
    assert E.child_spans(e, 1) == [(2, 3)]
    assert E.child_spans(e, 2) == []


@given(st.integers(1, 8), st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_child_spans_partition_parent(n_ops, seed):
    rng = np.random.default_rng(seed)
    e = random_expr(rng, n_ops)
    lo, hi = E.subtree_span(e, 0)
    spans = E.child_spans(e, 0)
    assert lo == 0 and hi == len(e)
    assert spans[0][0] == 1 and spans[-1][1] == hi
    for (a, b), (c, d) in zip(spans, spans[1:]):
        assert b == c


# ---------------------------------------------------------------------------
# parsing and formatting
# ---------------------------------------------------------------------------

def test_parse_format_round_trip():
    for text in ("x1", "+ x1 x2", "+ pow2 div2 x1 C", "pow x1 pi", "- -1 -inf"):
        assert E.format_prefix(toks(text)) == text


def test_parse_accepts_unicode_aliases():
    assert toks("− x1 ⋄") == toks("- x1 C")


def test_parse_rejects_malformed():
    with pytest.raises(E.UnknownToken):
        E.parse_prefix("+ x1 frob")
    with pytest.raises(E.UnderfullExpression):
        E.parse_prefix("+ x1")
    with pytest.raises(E.OverfullExpression):
        E.parse_prefix("x1 x2")
    with pytest.raises(E.EmptyExpression):
        E.parse_prefix("")


def test_format_infix_pinned():
    assert E.format_infix(toks("+ pow2 div2 x1 C")) == "(((x1 / 2)^2) + c)"
    assert E.format_infix(toks("neg x1")) == "(-x1)"
    assert E.format_infix(toks("inv x2")) == "(1 / x2)"
    assert E.format_infix(toks("pow x1 pi")) == "(x1^pi)"
    assert E.format_infix(toks("mult3 x1")) == "(3 * x1)"
    assert E.format_infix(toks("pow1_2 x1")) == "(x1^(1/2))"
    assert E.format_infix(toks("sin x1")) == "sin(x1)"


# ---------------------------------------------------------------------------
# canonicalization
# ---------------------------------------------------------------------------

def test_canonicalize_pinned_example():
    assert E.canonicalize(toks("* + x2 x1 x1")) == toks("* x1 + x1 x2")


def test_canonicalize_placeholder_sorts_last():
    assert E.canonicalize(toks("+ C x1")) == toks("+ x1 C")
    assert E.canonicalize(toks("* C pow2 x1")) == toks("* pow2 x1 C")
    assert E.canonicalize(toks("+ 0 x3")) == toks("+ x3 0")


def test_canonicalize_noncommutative_untouched():
    for text in ("- x2 x1", "/ x2 x1", "pow pi x1"):
        assert E.canonicalize(toks(text)) == toks(text)


def test_canonicalize_variables_numeric_order():
    assert E.canonicalize(toks("+ x2 x1")) == toks("+ x1 x2")
    assert E.canonicalize(toks("* x10 x9")) == toks("* x9 x10")


def test_canonicalize_recurses_into_children():
    assert E.canonicalize(toks("- + x2 x1 + C x1")) == toks("- + x1 x2 + x1 C")


@given(st.integers(0, 8), st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_canonicalize_idempotent_and_shape_preserving(n_ops, seed):
    rng = np.random.default_rng(seed)
    e = random_expr(rng, n_ops, n_vars=3)
    c = E.canonicalize(e)
    E.validate(c)
    assert len(c) == len(e)
    assert sorted(c) == sorted(e)  # a permutation of the same bag of tokens
    assert E.canonicalize(c) == c


@given(st.integers(0, 7), st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_canonicalize_preserves_value_constant_free(n_ops, seed):
    rng = np.random.default_rng(seed)
    e = random_expr(rng, n_ops, n_vars=3, allow_const=False)
    c = E.canonicalize(e)
    for _ in range(4):
        row = rng.normal(0, 2, 3)
        a = oracle_eval(e, row)
        b = oracle_eval(c, row)
        # swapping commutative float operands is bit-exact
        assert (a == b) or (np.isnan(a) and np.isnan(b))


def test_compare_canonical_orders_streams():
    assert E.compare_canonical(toks("x1"), toks("x2")) == -1
    assert E.compare_canonical(toks("+ x1 x2"), toks("+ x1 x2")) == 0
    assert E.compare_canonical(toks("pi"), toks("+ x1 x2")) == 1  # literal after operator


# ---------------------------------------------------------------------------
# placeholder pruning and integer-op expansion
# ---------------------------------------------------------------------------

def test_prune_constants():
    assert E.prune_constants(toks("+ pow2 div2 x1 C")) == toks("pow2 div2 x1")
    assert E.prune_constants(toks("+ C C")) == toks("0")
    assert E.prune_constants(toks("sin C")) == toks("0")
    assert E.prune_constants(toks("+ x1 sin C")) == toks("x1")
    assert E.prune_constants(toks("+ x1 x2")) == toks("+ x1 x2")


def test_expand_integer_ops():
    assert E.expand_integer_ops(toks("mult3 x1")) == toks("* C x1")
    assert E.expand_integer_ops(toks("div5 sin x1")) == toks("* C sin x1")
    assert E.expand_integer_ops(toks("+ x1 x2")) == toks("+ x1 x2")


# ---------------------------------------------------------------------------
# counts
# ---------------------------------------------------------------------------

def test_counts():
    e = toks("+ * C x1 pow2 C")
    assert E.count_constants(e) == 2
    assert E.count_unique_variables(e) == 1
    assert E.variable_set(toks("+ x3 x1")) == frozenset({V.variable(1), V.variable(3)})
    assert E.count_unique_variables(toks("pi")) == 0
