"""Online simplification: rule application, cancellation, canonical sweep.

The engine alternates two passes until a sweep changes nothing or a
budget elapses, then canonicalizes.  The rules pass applies discovered
rewrites top-down with wildcard subtree matching.  The cancellation
pass flattens sum and product clusters into signed-multiplicity
multisets, merges and cancels terms under domain guards, absorbs
constant placeholders, and rebuilds deterministic, length-guarded
forms.  Output length never exceeds input length.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from . import vocab
from .vocab import (
    CONST,
    LIT_BASE,
    NONFINITE_LITERALS,
    TOTAL_DOMAIN_OPS,
    VAR_BASE,
    InvalidToken,
    arity,
    is_const,
    is_literal,
    is_operator,
    is_variable,
)
from .expr import PrefixExpr, canonical_key, canonicalize

# structural operator ids
_PLUS = vocab.op_id("+")
_MINUS = vocab.op_id("-")
_MUL = vocab.op_id("*")
_DIV = vocab.op_id("/")
_INV = vocab.op_id("inv")
_NEG = vocab.op_id("neg")
_EXP = vocab.op_id("exp")
_LOG = vocab.op_id("log")
_POW_K = {vocab.op_id(f"pow{k}"): k for k in (2, 3, 4, 5)}
_MULT_K = {vocab.op_id(f"mult{k}"): k for k in (2, 3, 4, 5)}
_DIV_K = {vocab.op_id(f"div{k}"): k for k in (2, 3, 4, 5)}
_MULT_BY_K = {k: op for op, k in _MULT_K.items()}
_DIV_BY_K = {k: op for op, k in _DIV_K.items()}
_POW_BY_K = {k: op for op, k in _POW_K.items()}

_CHAIN_OPS = frozenset({_NEG}) | set(_MULT_K) | set(_DIV_K)
_SUM_CHAIN = frozenset({_NEG}) | set(_MULT_K)
_PROD_HEADS = frozenset({_MUL, _DIV, _INV}) | set(_POW_K)

#: Multiplicity / coefficient magnitudes beyond this abort a rebuild.
_REBUILD_CAP = 1024

Binding = dict[int, PrefixExpr]


def _arity_table() -> tuple[int, ...]:
    table = []
    for token in range(CONST + 1):
        try:
            table.append(arity(token))
        except InvalidToken:
            table.append(0)
    return tuple(table)


# flat token -> arity array; the span walk below is the hottest loop
_ARITY = _arity_table()


def _span_end(seq: Sequence[int], i: int) -> int:
    ar = _ARITY
    need = 1
    while need:
        need += ar[seq[i]] - 1
        i += 1
    return i


# ---------------------------------------------------------------------------
# rule index
# ---------------------------------------------------------------------------

_Entry = tuple[int, PrefixExpr, PrefixExpr]


@dataclass(frozen=True)
class RuleIndex:
    """Immutable lookup structure over rewrite rules.

    Explicit (variable-free) patterns live in a hash map keyed by the
    full token sequence.  Patterns with variables are bucketed by root
    token and tried largest pattern first; ``by_arg`` and ``wild``
    re-slice each bucket by its second token (concrete or wildcard)
    with priority tags, so a lookup only scans candidates whose first
    two tokens can possibly match.
    """

    explicit: Mapping[PrefixExpr, PrefixExpr]
    buckets: Mapping[int, tuple[tuple[PrefixExpr, PrefixExpr], ...]]
    by_arg: Mapping[tuple[int, int], tuple[_Entry, ...]]
    wild: Mapping[int, tuple[_Entry, ...]]
    max_pattern_length: int

    def __len__(self) -> int:
        return len(self.explicit) + sum(len(b) for b in self.buckets.values())


EMPTY_INDEX = RuleIndex({}, {}, {}, {}, 0)


def build_index(
    rules: Iterable[tuple[PrefixExpr, PrefixExpr]],
    cap: int | None = None,
) -> RuleIndex:
    """Index rules for matching; patterns longer than cap are dropped."""
    explicit: dict[PrefixExpr, PrefixExpr] = {}
    buckets: dict[int, list[tuple[PrefixExpr, PrefixExpr]]] = {}
    max_len = 0
    for rule in rules:
        pattern, replacement = tuple(rule[0]), tuple(rule[1])
        if cap is not None and len(pattern) > cap:
            continue
        max_len = max(max_len, len(pattern))
        if any(is_variable(t) for t in pattern):
            buckets.setdefault(pattern[0], []).append((pattern, replacement))
        else:
            explicit.setdefault(pattern, replacement)
    by_arg: dict[tuple[int, int], list[_Entry]] = {}
    wild: dict[int, list[_Entry]] = {}
    for root in buckets:
        # largest to smallest; stable within one length (input order)
        buckets[root].sort(key=lambda pr: -len(pr[0]))
        # bucketed patterns have an operator root, so position 1 exists;
        # the seq tag lets lookups merge the two slices back in order
        for seq, (pattern, replacement) in enumerate(buckets[root]):
            entry = (seq, pattern, replacement)
            if is_variable(pattern[1]):
                wild.setdefault(root, []).append(entry)
            else:
                by_arg.setdefault((root, pattern[1]), []).append(entry)
    return RuleIndex(
        explicit,
        {r: tuple(b) for r, b in buckets.items()},
        {k: tuple(v) for k, v in by_arg.items()},
        {k: tuple(v) for k, v in wild.items()},
        max_len,
    )


# ---------------------------------------------------------------------------
# pattern matching
# ---------------------------------------------------------------------------

def _impure_span(span: PrefixExpr) -> bool:
    return any(is_const(t) or t in NONFINITE_LITERALS for t in span)


def match_pattern(
    pattern: PrefixExpr,
    subject: Sequence[int],
    at: int = 0,
) -> Binding | None:
    """Match a wildcard pattern against the subtree of subject at `at`.

    Pattern variables bind whole subtrees; every other pattern token
    must equal the subject token at the same structural position.  A
    repeated variable requires identical spans, and those spans must
    contain no placeholder and no non-finite literal.
    """
    binding: Binding = {}
    n = len(subject)
    ar = _ARITY
    ei = at
    for pt in pattern:
        if ei >= n:
            return None
        if VAR_BASE <= pt < LIT_BASE:
            need, end = 1, ei
            while need:
                need += ar[subject[end]] - 1
                end += 1
            span = tuple(subject[ei:end])
            bound = binding.get(pt)
            if bound is None:
                binding[pt] = span
            elif bound != span or _impure_span(span):
                return None
            ei = end
        else:
            if subject[ei] != pt:
                return None
            ei += 1
    # a full pattern consumes exactly one subtree; verify span alignment
    if ei != _span_end(subject, at):
        return None
    return binding


def substitute(replacement: PrefixExpr, binding: Binding) -> PrefixExpr:
    """Splice bound subtrees into the replacement's variable slots."""
    out: list[int] = []
    for t in replacement:
        span = binding.get(t)
        if span is not None and is_variable(t):
            out.extend(span)
        else:
            out.append(t)
    return tuple(out)


# ---------------------------------------------------------------------------
# rules pass
# ---------------------------------------------------------------------------

def lookup_rewrite(sub: PrefixExpr, index: RuleIndex) -> PrefixExpr | None:
    """Rewrite of the whole sequence by the first applicable rule, or None.

    Exact explicit lookup wins; otherwise the root's bucket is scanned
    largest pattern first.  A subtree is rewritable anywhere iff some
    node's sequence passes this lookup, so this is also the one-node
    irreducibility test used during discovery.
    """
    hit = index.explicit.get(sub)
    if hit is not None:
        return hit
    n = len(sub)
    if n < 2:
        return None
    conc = index.by_arg.get((sub[0], sub[1]), ())
    wild = index.wild.get(sub[0], ())
    i, j = 0, 0
    nc, nw = len(conc), len(wild)
    # two-pointer merge by seq tag preserves the bucket's try order
    while i < nc or j < nw:
        if j >= nw or (i < nc and conc[i][0] < wild[j][0]):
            _, pattern, replacement = conc[i]
            i += 1
        else:
            _, pattern, replacement = wild[j]
            j += 1
        if len(pattern) > n:
            continue
        binding = match_pattern(pattern, sub)
        if binding is None:
            continue
        out = substitute(replacement, binding)
        if len(out) <= n:
            return out
    return None


def rules_pass(expr: Sequence[int], index: RuleIndex) -> PrefixExpr:
    """Apply indexed rules everywhere, top-down, to a fixpoint.

    At each node: exact explicit lookup first, then variable rules from
    the largest bucket down; a hit splices the replacement and restarts
    at that node.  After children are rewritten the parent is retried
    once.
    """
    def rewrite(sub: PrefixExpr) -> PrefixExpr:
        while True:
            hit = lookup_rewrite(sub, index)
            if hit is None:
                break
            sub = hit
        k = arity(sub[0])
        if k == 0:
            return sub
        parts: list[PrefixExpr] = []
        i = 1
        changed = False
        for _ in range(k):
            end = _span_end(sub, i)
            child = sub[i:end]
            new = rewrite(child)
            changed = changed or new != child
            parts.append(new)
            i = end
        if not changed:
            return sub
        merged = (sub[0],) + tuple(t for p in parts for t in p)
        hit = lookup_rewrite(merged, index)
        if hit is not None:
            return rewrite(hit)
        return merged

    return rewrite(tuple(expr))


# ---------------------------------------------------------------------------
# cancellation: flattening
# ---------------------------------------------------------------------------

def _cluster_kind(sub: PrefixExpr) -> str | None:
    t = sub[0]
    if t == _PLUS or t == _MINUS:
        return "sum"
    if t in _PROD_HEADS:
        return "prod"
    if t in _CHAIN_OPS:
        i = 0
        sum_ok = True
        while sub[i] in _CHAIN_OPS:
            if sub[i] not in _SUM_CHAIN:
                sum_ok = False  # div-k carries a rational, not an integer
            i += 1
        head = sub[i]
        if sum_ok and (head == _PLUS or head == _MINUS):
            return "sum"
        return "prod"
    return None


def _flatten_sum(sub: PrefixExpr) -> list[tuple[PrefixExpr, int]]:
    """Terms of the maximal sum cluster with integer multiplicities."""
    terms: list[tuple[PrefixExpr, int]] = []

    def walk(i: int, mult: int) -> int:
        t = sub[i]
        if t == _PLUS:
            j = walk(i + 1, mult)
            return walk(j, mult)
        if t == _MINUS:
            j = walk(i + 1, mult)
            return walk(j, -mult)
        if t == _NEG:
            return walk(i + 1, -mult)
        if t in _MULT_K:
            return walk(i + 1, mult * _MULT_K[t])
        end = _span_end(sub, i)
        terms.append((sub[i:end], mult))
        return end

    walk(0, 1)
    return terms


def _flatten_product(
    sub: PrefixExpr,
) -> tuple[Fraction, list[tuple[PrefixExpr, int]]] | None:
    """Factors of the maximal product cluster with integer exponents.

    Returns (rational coefficient, factor list), or None when a
    magnitude cap is exceeded.
    """
    factors: list[tuple[PrefixExpr, int]] = []
    coeff = Fraction(1)

    def walk(i: int, e: int) -> int | None:
        nonlocal coeff
        if abs(e) > _REBUILD_CAP:
            return None
        t = sub[i]
        if t == _MUL:
            j = walk(i + 1, e)
            return None if j is None else walk(j, e)
        if t == _DIV:
            j = walk(i + 1, e)
            return None if j is None else walk(j, -e)
        if t == _INV:
            return walk(i + 1, -e)
        if t in _POW_K:
            # powers compose only with each other; the subtree below is
            # an atomic factor base (its own chains stay inside it)
            while sub[i] in _POW_K:
                e *= _POW_K[sub[i]]
                if abs(e) > _REBUILD_CAP:
                    return None
                i += 1
            end = _span_end(sub, i)
            factors.append((sub[i:end], e))
            return end
        if t == _NEG:
            coeff *= Fraction(-1) ** e
            return walk(i + 1, e)
        if t in _MULT_K:
            coeff *= Fraction(_MULT_K[t]) ** e
            return walk(i + 1, e)
        if t in _DIV_K:
            coeff *= Fraction(1, _DIV_K[t]) ** e
            return walk(i + 1, e)
        end = _span_end(sub, i)
        factors.append((sub[i:end], e))
        return end

    if walk(0, 1) is None:
        return None
    if coeff.numerator > _REBUILD_CAP or coeff.denominator > _REBUILD_CAP:
        return None
    return coeff, factors


def _total_domain(span: PrefixExpr) -> bool:
    for t in span:
        if is_operator(t):
            if t not in TOTAL_DOMAIN_OPS:
                return False
        elif is_const(t) or t in NONFINITE_LITERALS:
            return False
    return True


# ---------------------------------------------------------------------------
# cancellation: rendering helpers
# ---------------------------------------------------------------------------

def _render_repeat(base: PrefixExpr, count: int, chain_by_k: dict[int, int],
                   join: int) -> PrefixExpr | None:
    """Shortest rendering of `count` copies of base combined by `join`.

    chain_by_k maps k in 2..5 to the unary token applying k at once
    (mult-k for sums, pow-k for products); `join` is the binary token
    combining split parts (+ or *).  Used for multiplicities and
    exponents alike.  Returns None above the magnitude cap.
    """
    if count <= 0 or count > _REBUILD_CAP:
        return None
    memo: dict[int, PrefixExpr] = {1: base}

    def best(m: int) -> PrefixExpr:
        got = memo.get(m)
        if got is not None:
            return got
        candidates: list[PrefixExpr] = []
        for k in (5, 4, 3, 2):
            if m % k == 0:
                candidates.append((chain_by_k[k],) + best(m // k))
        if not candidates:
            # m has a prime factor above 5: split into two summed parts
            for a in range(1, m // 2 + 1):
                candidates.append((join,) + best(a) + best(m - a))
        out = min(candidates, key=len)
        memo[m] = out
        return out

    return best(count)


def _chain(pieces: list[PrefixExpr], join: int) -> PrefixExpr:
    """Left-deep association of already-sorted pieces."""
    out = pieces[0]
    for piece in pieces[1:]:
        out = (join,) + out + piece
    return out


def _greedy_factors(m: int) -> list[int] | None:
    """Greedy 5-4-3-2 factor chain of m, or None when not 2-3-5-smooth."""
    out: list[int] = []
    while m > 1:
        for k in (5, 4, 3, 2):
            if m % k == 0:
                out.append(k)
                m //= k
                break
        else:
            return None
    return out


def _coeff_chain(core: PrefixExpr, coeff: Fraction) -> PrefixExpr | None:
    """Wrap core with mult-k / div-k / neg tokens realizing the coefficient.

    Factor order matches _render_repeat (greedy largest factor goes
    outermost) so a rendered chain re-renders to itself.
    """
    div_ks = _greedy_factors(coeff.denominator)
    mul_ks = _greedy_factors(abs(coeff.numerator))
    if div_ks is None or mul_ks is None:
        return None  # not 2-3-5-smooth; cannot render
    out = core
    for k in reversed(div_ks):
        out = (_DIV_BY_K[k],) + out
    for k in reversed(mul_ks):
        out = (_MULT_BY_K[k],) + out
    if coeff < 0:
        out = (_NEG,) + out
    return out


# ---------------------------------------------------------------------------
# cancellation: cluster rebuilds
# ---------------------------------------------------------------------------

def _rebuild_sum(raw_terms: list[tuple[PrefixExpr, int]]) -> PrefixExpr | None:
    """Merge a flattened sum and render it back; None aborts the rebuild."""
    has_c = False
    merged: dict = {}          # key -> [canon, pos_mult, neg_mult, total?]
    order: list = []
    unique = 0
    literal_keys: list = []

    for span, mult in raw_terms:
        if span == (CONST,):
            has_c = True
            continue
        canon = canonicalize(span)
        if len(canon) == 1 and is_literal(canon[0]) and canon[0] not in NONFINITE_LITERALS:
            if canon[0] == vocab.LIT_ZERO:
                continue
            key = ("lit", canon[0])
        elif is_const(canon[0]) or any(is_const(t) for t in canon) or any(
                t in NONFINITE_LITERALS for t in canon):
            unique += 1
            key = ("u", unique)
        elif _total_domain(canon):
            key = ("t", canon)
        else:
            key = ("p", canon)
        entry = merged.get(key)
        if entry is None:
            merged[key] = entry = [canon, 0, 0, key[0] in ("t", "lit")]
            order.append(key)
        if entry[3]:  # total domain: net multiplicity, cancellation allowed
            entry[1] += mult
        elif mult > 0:
            entry[1] += mult
        else:
            entry[2] += -mult

    if has_c:
        # a bare placeholder swallows every finite-literal term
        order = [k for k in order if k[0] != "lit"]

    pos: list[PrefixExpr] = []
    neg: list[PrefixExpr] = []
    for key in order:
        canon, p, n, total = merged[key]
        if total:
            net = p - n
            parts = [(abs(net), net < 0)] if net else []
        else:
            parts = [(p, False), (n, True)]
        for m, negate in parts:
            if m == 0:
                continue
            if m > _REBUILD_CAP:
                return None
            rendered = _render_repeat(canon, abs(m), _MULT_BY_K, _PLUS)
            if rendered is None:
                return None
            (neg if negate else pos).append(rendered)
    if has_c:
        pos.append((CONST,))

    if not pos and not neg:
        return (vocab.LIT_ZERO,)
    pos.sort(key=canonical_key)
    neg.sort(key=canonical_key)
    if not neg:
        return _chain(pos, _PLUS)
    if not pos:
        return (_NEG,) + _chain(neg, _PLUS)
    return (_MINUS,) + _chain(pos, _PLUS) + _chain(neg, _PLUS)


def _rebuild_product(coeff: Fraction,
                     raw_factors: list[tuple[PrefixExpr, int]]) -> PrefixExpr | None:
    """Merge a flattened product and render it back; None aborts."""
    has_c = False
    merged: dict = {}
    order: list = []
    unique = 0

    for span, e in raw_factors:
        if span == (CONST,) and e > 0:
            has_c = True  # negative exponents on a bare placeholder stay opaque
            continue
        canon = canonicalize(span)
        if len(canon) == 1 and is_literal(canon[0]) and canon[0] not in NONFINITE_LITERALS:
            tok = canon[0]
            if tok == vocab.LIT_ZERO:
                if e < 0:
                    unique += 1
                    key = ("u", unique)  # division by literal zero stays opaque
                else:
                    coeff *= 0
                    continue
            elif tok == vocab.LIT_ONE:
                continue
            elif tok == vocab.LIT_NEG_ONE:
                coeff *= Fraction(-1) ** e
                continue
            else:
                key = ("lit", tok)  # pi, e: value-keyed, exponents merge
        elif any(is_const(t) for t in canon) or any(
                t in NONFINITE_LITERALS for t in canon):
            unique += 1
            key = ("u", unique)
        elif _total_domain(canon):
            key = ("t", canon)
        else:
            key = ("p", canon)
        entry = merged.get(key)
        if entry is None:
            merged[key] = entry = [canon, 0, 0, key[0] in ("t", "lit")]
            order.append(key)
        if entry[3]:
            entry[1] += e
        elif e > 0:
            entry[1] += e
        else:
            entry[2] += -e

    if has_c:
        # the placeholder absorbs the whole rational part and literal factors
        coeff = Fraction(1)
        order = [k for k in order if k[0] != "lit"]

    if coeff == 0:
        if all(merged[k][3] for k in order) and not has_c:
            return (vocab.LIT_ZERO,)
        return None  # keep the original; zeroing a partial domain is unsound

    num: list[PrefixExpr] = []
    den: list[PrefixExpr] = []
    for key in order:
        canon, p, n, total = merged[key]
        if total:
            net = p - n
            parts = [(abs(net), net < 0)] if net else []
        else:
            parts = [(p, False), (n, True)]
        for e, inverted in parts:
            if e == 0:
                continue
            if e > _REBUILD_CAP:
                return None
            rendered = _render_repeat(canon, e, _POW_BY_K, _MUL)
            if rendered is None:
                return None
            (den if inverted else num).append(rendered)

    num.sort(key=canonical_key)
    den.sort(key=canonical_key)
    if not num and not den:
        core: PrefixExpr | None = None
    elif not den:
        core = _chain(num, _MUL)
    elif not num:
        core = (_INV,) + _chain(den, _MUL)
    else:
        core = (_DIV,) + _chain(num, _MUL) + _chain(den, _MUL)

    if has_c:
        if core is None:
            return (CONST,)
        return (_MUL,) + core + (CONST,)
    if core is None:
        if coeff == 1:
            return (vocab.LIT_ONE,)
        if coeff == -1:
            return (vocab.LIT_NEG_ONE,)
        core = (vocab.LIT_ONE,)
    return _coeff_chain(core, coeff)


# ---------------------------------------------------------------------------
# cancellation pass
# ---------------------------------------------------------------------------

def _cancel(sub: PrefixExpr) -> PrefixExpr:
    if len(sub) == 1:
        return sub
    op = sub[0]
    k = arity(op)

    parts: list[PrefixExpr] = []
    i = 1
    for _ in range(k):
        end = _span_end(sub, i)
        parts.append(_cancel(sub[i:end]))
        i = end
    base = (op,) + tuple(t for p in parts for t in p)

    # unary inverse fold with sound domain: log(exp(x)) = x
    if op == _LOG and base[1] == _EXP:
        base = base[2:]
        if len(base) == 1:
            return base

    kind = _cluster_kind(base)
    if kind == "sum":
        rebuilt = _rebuild_sum(_flatten_sum(base))
    elif kind == "prod":
        flat = _flatten_product(base)
        rebuilt = None if flat is None else _rebuild_product(*flat)
    else:
        rebuilt = None
    if rebuilt is not None and len(rebuilt) <= len(base):
        return rebuilt
    return base


def cancellation_pass(expr: Sequence[int]) -> PrefixExpr:
    """Flatten, merge, and cancel sum/product clusters; canonical output.

    Opposite-sign cancellation and placeholder absorption follow domain
    guards: only subtrees built from total-domain operations may cancel
    to nothing, and a bare placeholder absorbs only finite literals and
    the rational coefficient.  The result is never longer than the
    input and is returned canonicalized.

    A rebuild can mint child clusters that were not present before it
    (a distributed coefficient, absorption one level down), so sweeps
    repeat until a whole sweep changes nothing.
    """
    e = tuple(expr)
    prev: PrefixExpr | None = None
    for _ in range(2 * len(e) + 4):
        out = canonicalize(_cancel(e))
        if len(out) > len(e):
            out = e
        if out == e:
            return e
        if out == prev:
            # settle a reorder cycle deterministically
            return min(e, out, key=lambda s: (len(s), s))
        prev, e = e, out
    return e


# ---------------------------------------------------------------------------
# top-level driver
# ---------------------------------------------------------------------------

def simplify(
    expr: Sequence[int],
    index: RuleIndex | None = None,
    budget: int = 10,
) -> PrefixExpr:
    """Normalize an expression: alternate cancellation and rule sweeps.

    Cancellation runs first in each sweep so cluster-level placeholder
    absorption settles before pattern rules see the flattened members;
    a placeholder times a literal zero must stay a placeholder rather
    than annihilate through a wildcard rule.  Sweeps repeat until one
    changes nothing or the budget elapses; the result is canonicalized.
    Output length never exceeds input length, and the operation is
    idempotent for converged inputs.
    """
    idx = index if index is not None else EMPTY_INDEX
    cur = tuple(expr)
    for _ in range(max(1, budget)):
        nxt = rules_pass(cancellation_pass(cur), idx)
        if nxt == cur:
            break
        cur = nxt
    return canonicalize(cur)
