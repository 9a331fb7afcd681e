"""Token layout, operator property table, and alphabet serialization."""

import math

import pytest

from prenorm import vocab as V


# ---------------------------------------------------------------------------
# operator table
# ---------------------------------------------------------------------------

EXPECTED_OP_NAMES = (
    "+", "-", "*", "/", "abs", "inv", "neg", "pow",
    "pow2", "pow3", "pow4", "pow5",
    "pow1_2", "pow1_3", "pow1_4", "pow1_5",
    "sin", "cos", "tan", "asin", "acos", "atan",
    "sinh", "cosh", "tanh", "asinh", "acosh", "atanh",
    "exp", "log",
    "mult2", "mult3", "mult4", "mult5",
    "div2", "div3", "div4", "div5",
)

BINARY = {"+", "-", "*", "/", "pow"}
HEAVY = {"+", "-", "*", "/"}

INVERSE_PAIRS = [
    ("neg", "neg"), ("inv", "inv"), ("exp", "log"),
    ("sin", "asin"), ("cos", "acos"), ("tan", "atan"),
    ("sinh", "asinh"), ("cosh", "acosh"), ("tanh", "atanh"),
    ("pow2", "pow1_2"), ("pow3", "pow1_3"), ("pow4", "pow1_4"), ("pow5", "pow1_5"),
    ("mult2", "div2"), ("mult3", "div3"), ("mult4", "div4"), ("mult5", "div5"),
]


def test_operator_names_and_count():
    assert V.N_OPERATORS == 38
    assert V.OP_NAMES == EXPECTED_OP_NAMES
    assert len({info.name for info in V.OPERATORS}) == 38


def test_arities():
    for info in V.OPERATORS:
        assert info.arity == (2 if info.name in BINARY else 1)


def test_weights_heavy_arithmetic():
    for info in V.OPERATORS:
        assert info.weight == (10 if info.name in HEAVY else 1)
    # total sampling mass, split by arity: 41 binary, 33 unary
    assert sum(i.weight for i in V.OPERATORS) == 74
    assert sum(i.weight for i in V.OPERATORS if i.arity == 2) == 41
    assert sum(i.weight for i in V.OPERATORS if i.arity == 1) == 33


def test_commutative_flags():
    assert {i.name for i in V.OPERATORS if i.commutative} == {"+", "*"}


def test_inverse_pairs_symmetric():
    by_name = {i.name: i for i in V.OPERATORS}
    for a, b in INVERSE_PAIRS:
        assert by_name[a].inverse == V.op_id(b)
        assert by_name[b].inverse == V.op_id(a)
    paired = {n for ab in INVERSE_PAIRS for n in ab}
    for info in V.OPERATORS:
        if info.name not in paired:
            assert info.inverse is None


def test_integer_fold_tags():
    by_name = {i.name: i for i in V.OPERATORS}
    for k in (2, 3, 4, 5):
        assert by_name[f"mult{k}"].fold == ("mult", k)
        assert by_name[f"div{k}"].fold == ("div", k)
    assert by_name["+"].fold is None
    assert by_name["pow2"].fold is None


def test_total_domain_membership():
    names = {V.name_of(t) for t in V.TOTAL_DOMAIN_OPS}
    for always_defined in ("+", "-", "*", "neg", "abs", "pow2", "pow1_3",
                           "sin", "cos", "tanh", "exp", "mult2", "div5", "atan"):
        assert always_defined in names
    for partial in ("/", "inv", "pow", "log", "pow1_2", "pow1_4",
                    "asin", "acos", "acosh", "atanh"):
        assert partial not in names


# ---------------------------------------------------------------------------
# token layout
# ---------------------------------------------------------------------------

def test_layout_ranges():
    assert V.variable(1) == V.VAR_BASE
    assert V.variable(32) == V.VAR_BASE + 31
    assert V.var_index(V.variable(7)) == 7
    assert V.LIT_BASE > V.VAR_BASE + V.MAX_VARIABLES
    assert V.CONST > V.LIT_BASE + V.N_LITERALS - 1


def test_variable_bounds():
    with pytest.raises(V.InvalidToken):
        V.variable(0)
    with pytest.raises(V.InvalidToken):
        V.variable(33)


def test_literal_values():
    assert V.literal_value(V.LIT_ZERO) == 0.0
    assert V.literal_value(V.LIT_ONE) == 1.0
    assert V.literal_value(V.LIT_NEG_ONE) == -1.0
    assert V.literal_value(V.LIT_PI) == math.pi
    assert V.literal_value(V.LIT_E) == math.e
    assert V.literal_value(V.LIT_INF) == math.inf
    assert V.literal_value(V.LIT_NEG_INF) == -math.inf
    assert math.isnan(V.literal_value(V.LIT_NAN))
    assert V.NONFINITE_LITERALS == frozenset({V.LIT_INF, V.LIT_NEG_INF, V.LIT_NAN})


def test_arity_rejects_gaps():
    with pytest.raises(V.InvalidToken):
        V.arity(V.N_OPERATORS)  # gap between operators and variables
    with pytest.raises(V.InvalidToken):
        V.arity(-1)
    with pytest.raises(V.InvalidToken):
        V.arity(V.CONST + 1)


def test_name_round_trip_all_tokens():
    tokens = (
        list(range(V.N_OPERATORS))
        + [V.variable(i + 1) for i in range(V.MAX_VARIABLES)]
        + list(range(V.LIT_BASE, V.LIT_BASE + V.N_LITERALS))
        + [V.CONST]
    )
    for t in tokens:
        assert V.token_from_name(V.name_of(t)) == t


def test_name_aliases():
    assert V.token_from_name("C") == V.CONST
    assert V.token_from_name("⋄") == V.CONST       # lozenge placeholder
    assert V.token_from_name("−") == V.op_id("-")  # unicode minus
    assert V.token_from_name("−1") == V.token_from_name("-1")
    with pytest.raises(V.InvalidToken):
        V.token_from_name("bogus")


# ---------------------------------------------------------------------------
# canonical token order
# ---------------------------------------------------------------------------

def test_order_variables_before_operators_before_literals_before_placeholder():
    assert V.order_rank(V.variable(1)) < V.order_rank(V.variable(2))
    assert V.order_rank(V.variable(32)) < V.order_rank(V.op_id("+"))
    assert V.order_rank(V.op_id("+")) < V.order_rank(V.op_id("pow2"))
    assert V.order_rank(V.op_id("div5")) < V.order_rank(V.LIT_ZERO)
    assert V.order_rank(V.LIT_ZERO) < V.order_rank(V.LIT_NAN)
    assert V.order_rank(V.LIT_NAN) < V.order_rank(V.CONST)


def test_order_rank_total_and_dense():
    tokens = (
        [V.variable(i + 1) for i in range(V.MAX_VARIABLES)]
        + list(range(V.N_OPERATORS))
        + list(range(V.LIT_BASE, V.LIT_BASE + V.N_LITERALS))
        + [V.CONST]
    )
    ranks = sorted(V.order_rank(t) for t in tokens)
    assert ranks == list(range(len(tokens)))


# ---------------------------------------------------------------------------
# alphabet
# ---------------------------------------------------------------------------

def test_full_alphabet_composition():
    a = V.full_alphabet(4)
    assert len(a.operators) == 38
    assert a.n_vars == 4
    assert len(a.literals) == 8
    assert len(a.tokens()) == 38 + 4 + 8 + 1
    assert V.CONST in a.tokens()
    # pattern-side leaves exclude the placeholder
    assert set(a.leaf_tokens()) == set(a.tokens()) - set(a.operators) - {V.CONST}


def test_alphabet_from_names_sorts_and_dedups():
    a = V.Alphabet.from_names(["neg", "+", "neg", "-"], n_vars=2, literals=["1", "0", "1"])
    assert [V.name_of(t) for t in a.operators] == ["+", "-", "neg"]
    assert [V.name_of(t) for t in a.literals] == ["0", "1"]
    assert a.variables == (V.variable(1), V.variable(2))


def test_alphabet_serialize_stable_and_fingerprint():
    a = V.full_alphabet(4)
    b = V.full_alphabet(4)
    assert a.serialize() == b.serialize()
    assert a.fingerprint() == b.fingerprint()
    assert len(a.fingerprint()) == 16
    assert int(a.fingerprint(), 16) >= 0  # hex digest prefix
    c = V.full_alphabet(5)
    assert a.fingerprint() != c.fingerprint()
    toy = V.Alphabet.from_names(["+", "-", "neg"], n_vars=2, literals=["0", "1"])
    assert toy.fingerprint() != a.fingerprint()
    assert "placeholder C" in a.serialize()
