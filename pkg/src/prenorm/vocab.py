"""Token alphabet and operator property table.

Every other module consults this one for token encodings, operator
properties, and the canonical token ordering. Tokens are plain ints:
operators occupy [0, 38), variables x1..x32 occupy [40, 72), literals
occupy [80, 88), and the free-constant placeholder is 90. Gaps between
the ranges are deliberate so a stray off-by-one is an invalid token
instead of a silently different one.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

__all__ = [
    "N_OPERATORS",
    "VAR_BASE",
    "MAX_VARIABLES",
    "LIT_BASE",
    "CONST",
    "InvalidToken",
    "OperatorInfo",
    "OPERATORS",
    "LITERAL_NAMES",
    "LITERAL_VALUES",
    "TOTAL_DOMAIN_OPS",
    "SUM_OPS",
    "PRODUCT_OPS",
    "arity",
    "is_operator",
    "is_variable",
    "is_literal",
    "is_const",
    "variable",
    "var_index",
    "literal_value",
    "op_id",
    "properties",
    "name_of",
    "token_from_name",
    "order_rank",
    "token_order",
    "Alphabet",
    "full_alphabet",
]

# ---------------------------------------------------------------------------
# token id layout
# ---------------------------------------------------------------------------

N_OPERATORS = 38
VAR_BASE = 40
MAX_VARIABLES = 32
LIT_BASE = 80
N_LITERALS = 8
CONST = 90


class InvalidToken(ValueError):
    """Raised for ids or names outside the fixed alphabet."""


OP_NAMES = (
    "+", "-", "*", "/",
    "abs", "inv", "neg", "pow",
    "pow2", "pow3", "pow4", "pow5",
    "pow1_2", "pow1_3", "pow1_4", "pow1_5",
    "sin", "cos", "tan",
    "asin", "acos", "atan",
    "sinh", "cosh", "tanh",
    "asinh", "acosh", "atanh",
    "exp", "log",
    "mult2", "mult3", "mult4", "mult5",
    "div2", "div3", "div4", "div5",
)

LITERAL_NAMES = ("0", "1", "-1", "pi", "e", "inf", "-inf", "nan")

LIT_ZERO = LIT_BASE + 0
LIT_ONE = LIT_BASE + 1
LIT_NEG_ONE = LIT_BASE + 2
LIT_PI = LIT_BASE + 3
LIT_E = LIT_BASE + 4
LIT_INF = LIT_BASE + 5
LIT_NEG_INF = LIT_BASE + 6
LIT_NAN = LIT_BASE + 7

NONFINITE_LITERALS = frozenset({LIT_INF, LIT_NEG_INF, LIT_NAN})

LITERAL_VALUES = {
    LIT_BASE + 0: 0.0,
    LIT_BASE + 1: 1.0,
    LIT_BASE + 2: -1.0,
    LIT_BASE + 3: math.pi,
    LIT_BASE + 4: math.e,
    LIT_BASE + 5: math.inf,
    LIT_BASE + 6: -math.inf,
    LIT_BASE + 7: math.nan,
}


# ---------------------------------------------------------------------------
# operator property table
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OperatorInfo:
    """Static properties of one operator."""

    op: int
    name: str
    arity: int
    weight: int
    commutative: bool = False
    cluster: str | None = None       # "sum" | "product" | None
    inverse: int | None = None       # symmetric partner op id
    fold: tuple[str, int] | None = None  # ("mult"|"div", k) for integer folds


def _build_operators() -> tuple[OperatorInfo, ...]:
    ids = {name: i for i, name in enumerate(OP_NAMES)}
    binary = {"+", "-", "*", "/", "pow"}
    heavy = {"+", "-", "*", "/"}
    commutative = {"+", "*"}
    cluster = {"+": "sum", "-": "sum", "*": "product", "/": "product"}
    inverse_pairs = [
        ("neg", "neg"), ("inv", "inv"), ("exp", "log"),
        ("sin", "asin"), ("cos", "acos"), ("tan", "atan"),
        ("sinh", "asinh"), ("cosh", "acosh"), ("tanh", "atanh"),
        ("pow2", "pow1_2"), ("pow3", "pow1_3"),
        ("pow4", "pow1_4"), ("pow5", "pow1_5"),
        ("mult2", "div2"), ("mult3", "div3"),
        ("mult4", "div4"), ("mult5", "div5"),
    ]
    inverse: dict[str, str] = {}
    for a, b in inverse_pairs:
        inverse[a] = b
        inverse[b] = a

    infos = []
    for i, name in enumerate(OP_NAMES):
        fold = None
        if name.startswith("mult"):
            fold = ("mult", int(name[4:]))
        elif name.startswith("div") and name != "div":
            fold = ("div", int(name[3:]))
        infos.append(OperatorInfo(
            op=i,
            name=name,
            arity=2 if name in binary else 1,
            weight=10 if name in heavy else 1,
            commutative=name in commutative,
            cluster=cluster.get(name),
            inverse=ids[inverse[name]] if name in inverse else None,
            fold=fold,
        ))
    return tuple(infos)


OPERATORS: tuple[OperatorInfo, ...] = _build_operators()

_OP_IDS = {info.name: info.op for info in OPERATORS}

# Operators whose kernels are defined (never NaN) on all finite real inputs.
# The cancellation pass consults this before removing opposite-sign pairs:
# a subtree built purely from these cannot introduce NaN rows, so replacing
# t - t by 0 preserves semantics on the whole finite domain.
TOTAL_DOMAIN_OPS = frozenset(
    _OP_IDS[n] for n in (
        "+", "-", "*", "abs", "neg",
        "pow2", "pow3", "pow4", "pow5", "pow1_3", "pow1_5",
        "sin", "cos", "tan", "atan",
        "sinh", "cosh", "tanh", "asinh",
        "exp",
        "mult2", "mult3", "mult4", "mult5",
        "div2", "div3", "div4", "div5",
    )
)

# Tokens the cluster-flattening passes descend through.
SUM_OPS = frozenset(_OP_IDS[n] for n in ("+", "-"))
PRODUCT_OPS = frozenset(_OP_IDS[n] for n in ("*", "/"))


# ---------------------------------------------------------------------------
# token predicates and accessors
# ---------------------------------------------------------------------------

def is_operator(token: int) -> bool:
    return 0 <= token < N_OPERATORS


def is_variable(token: int) -> bool:
    return VAR_BASE <= token < VAR_BASE + MAX_VARIABLES


def is_literal(token: int) -> bool:
    return LIT_BASE <= token < LIT_BASE + N_LITERALS


def is_const(token: int) -> bool:
    return token == CONST


def variable(index: int) -> int:
    """Token for x<index>, 1-based."""
    if not 1 <= index <= MAX_VARIABLES:
        raise InvalidToken(f"variable index {index} outside [1, {MAX_VARIABLES}]")
    return VAR_BASE + index - 1


def var_index(token: int) -> int:
    if not is_variable(token):
        raise InvalidToken(f"token {token} is not a variable")
    return token - VAR_BASE + 1


def literal_value(token: int) -> float:
    if not is_literal(token):
        raise InvalidToken(f"token {token} is not a literal")
    return LITERAL_VALUES[token]


def op_id(name: str) -> int:
    try:
        return _OP_IDS[name]
    except KeyError:
        raise InvalidToken(f"unknown operator {name!r}") from None


def properties(op: int) -> OperatorInfo:
    if not is_operator(op):
        raise InvalidToken(f"unknown operator id {op}")
    return OPERATORS[op]


_ARITY = [0] * (CONST + 1)
for _info in OPERATORS:
    _ARITY[_info.op] = _info.arity


def arity(token: int) -> int:
    """0 for leaves (variables, literals, placeholder), else table arity."""
    if 0 <= token <= CONST and (is_operator(token) or is_variable(token)
                                or is_literal(token) or is_const(token)):
        return _ARITY[token]
    raise InvalidToken(f"invalid token id {token}")


# ---------------------------------------------------------------------------
# names
# ---------------------------------------------------------------------------

def name_of(token: int) -> str:
    if is_operator(token):
        return OP_NAMES[token]
    if is_variable(token):
        return f"x{var_index(token)}"
    if is_literal(token):
        return LITERAL_NAMES[token - LIT_BASE]
    if is_const(token):
        return "C"
    raise InvalidToken(f"invalid token id {token}")


_LIT_IDS = {name: LIT_BASE + i for i, name in enumerate(LITERAL_NAMES)}

# Input aliases: the placeholder glyph and the typographic minus.
_ALIASES = {"⋄": "C", "−": "-", "−1": "-1"}


def token_from_name(name: str) -> int:
    """Inverse of name_of; accepts a couple of display aliases on input."""
    name = _ALIASES.get(name, name)
    if name == "C":
        return CONST
    if name in _OP_IDS:
        return _OP_IDS[name]
    if name in _LIT_IDS:
        return _LIT_IDS[name]
    if len(name) > 1 and name[0] == "x" and name[1:].isdigit():
        return variable(int(name[1:]))
    raise InvalidToken(f"unknown token {name!r}")


# ---------------------------------------------------------------------------
# canonical total order
# ---------------------------------------------------------------------------
# Variables ascending, then operators in table order, then literals in the
# fixed list order, then the placeholder last. Exposed both as a comparison
# and as an integer rank (the rank is what the hot paths sort by).

_ORDER_RANK = [-1] * (CONST + 1)
for _i in range(MAX_VARIABLES):
    _ORDER_RANK[VAR_BASE + _i] = _i
for _i in range(N_OPERATORS):
    _ORDER_RANK[_i] = MAX_VARIABLES + _i
for _i in range(N_LITERALS):
    _ORDER_RANK[LIT_BASE + _i] = MAX_VARIABLES + N_OPERATORS + _i
_ORDER_RANK[CONST] = MAX_VARIABLES + N_OPERATORS + N_LITERALS


def order_rank(token: int) -> int:
    rank = _ORDER_RANK[token] if 0 <= token <= CONST else -1
    if rank < 0:
        raise InvalidToken(f"invalid token id {token}")
    return rank


def token_order(a: int, b: int) -> int:
    """-1, 0, or 1 as a sorts before, equal to, or after b."""
    ra, rb = order_rank(a), order_rank(b)
    return (ra > rb) - (ra < rb)


# ---------------------------------------------------------------------------
# alphabets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Alphabet:
    """A sub-universe of the fixed vocabulary, used for rule discovery and
    for stamping rules files with the alphabet they were discovered under.

    The placeholder is implicitly part of every alphabet's candidate side;
    it never appears on the pattern side.
    """

    operators: tuple[int, ...]
    n_vars: int
    literals: tuple[int, ...]

    def __post_init__(self) -> None:
        if not 0 <= self.n_vars <= MAX_VARIABLES:
            raise InvalidToken(f"n_vars {self.n_vars} outside [0, {MAX_VARIABLES}]")
        for op in self.operators:
            if not is_operator(op):
                raise InvalidToken(f"operator id {op} invalid")
        for lit in self.literals:
            if not is_literal(lit):
                raise InvalidToken(f"literal id {lit} invalid")
        object.__setattr__(self, "operators", tuple(sorted(set(self.operators))))
        object.__setattr__(self, "literals", tuple(sorted(set(self.literals))))

    @classmethod
    def from_names(cls, operators: Iterable[str], n_vars: int,
                   literals: Iterable[str]) -> "Alphabet":
        return cls(
            operators=tuple(op_id(n) for n in operators),
            n_vars=n_vars,
            literals=tuple(_LIT_IDS[n] for n in literals),
        )

    @property
    def variables(self) -> tuple[int, ...]:
        return tuple(VAR_BASE + i for i in range(self.n_vars))

    def leaf_tokens(self) -> tuple[int, ...]:
        """Pattern-side leaves (no placeholder), in canonical order."""
        return self.variables + self.literals

    def tokens(self) -> tuple[int, ...]:
        """Every token of the language, placeholder included."""
        return self.operators + self.variables + self.literals + (CONST,)

    def serialize(self) -> str:
        """Versioned UTF-8 table; the source text of the fingerprint."""
        lines = ["vocabulary 1"]
        for op in self.operators:
            info = OPERATORS[op]
            flags = "commutative" if info.commutative else "-"
            lines.append(f"operator {info.name} {info.arity} {info.weight} {flags}")
        lines.append(f"variables {self.n_vars}")
        for lit in self.literals:
            lines.append(f"literal {name_of(lit)}")
        lines.append("placeholder C")
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()[:16]


def full_alphabet(n_vars: int = 4,
                  literals: Sequence[str] = LITERAL_NAMES) -> Alphabet:
    """All 38 operators; rule discovery defaults to 4 variables."""
    return Alphabet(
        operators=tuple(range(N_OPERATORS)),
        n_vars=n_vars,
        literals=tuple(_LIT_IDS[n] for n in literals),
    )
