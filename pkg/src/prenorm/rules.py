"""Offline discovery of shortening rewrite rules and their file format.

Discovery scans expression lengths in ascending order.  An expression
with a reducible proper subtree is itself reducible, so each level's
pool is composed directly from shorter irreducible survivors and the
reducibility test collapses to a single root lookup.  Numeric screens
over a shared probe grid (bucketed image hashing for constant-free
candidates, closed-form statistics for placeholder families, and a
constant-row probe) shortlist candidate pairs; only shortlisted pairs
reach the full constant-fitting equivalence protocol.  Rules found
while a level is in progress are quarantined and merged once the level
completes, so the outcome does not depend on scan order within a level.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from . import vocab
from .vocab import (
    CONST,
    Alphabet,
    arity,
    is_const,
    is_variable,
    literal_value,
    order_rank,
    var_index,
)
from .expr import (
    ExpressionError,
    PrefixExpr,
    canonical_key,
    count_constants,
    format_prefix,
    parse_prefix,
    validate,
    variable_set,
)
from .evaluate import apply_kernel, compile_expr, evaluate
from .fit import EquivalenceConfig, equivalent, extended_close_mask
from .simplify import RuleIndex, build_index, lookup_rewrite

FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# rules and rule sets
# ---------------------------------------------------------------------------

class Rule(NamedTuple):
    """One rewrite: a placeholder-free pattern and its shorter replacement."""

    pattern: PrefixExpr
    replacement: PrefixExpr

    @property
    def explicit(self) -> bool:
        """True when the pattern contains no variables, so it matches one
        exact token sequence instead of a subtree shape."""
        return not any(is_variable(t) for t in self.pattern)


def validate_rule(pattern: Sequence[int], replacement: Sequence[int]) -> Rule:
    """Check the rule invariants and return the normalized rule.

    Patterns never contain the constant placeholder, replacements
    introduce no new variables, and applying a rule can never grow an
    expression: the replacement is strictly shorter, or of equal length
    with strictly fewer placeholders.
    """
    pat = validate(pattern)
    rep = validate(replacement)
    if any(is_const(t) for t in pat):
        raise ValueError("pattern contains the constant placeholder")
    if not variable_set(rep) <= variable_set(pat):
        raise ValueError("replacement uses a variable absent from the pattern")
    if len(rep) > len(pat):
        raise ValueError("replacement is longer than the pattern")
    if len(rep) == len(pat) and count_constants(rep) >= count_constants(pat):
        raise ValueError("equal-length replacement must carry fewer placeholders")
    return Rule(pat, rep)


def _rule_order(rule: Rule) -> tuple:
    return (len(rule.pattern), canonical_key(rule.pattern))


@dataclass(frozen=True)
class RuleSet:
    """An ordered rule collection stamped with its discovery provenance.

    Construction normalizes: every rule is re-validated, duplicate
    patterns are rejected, and rules are sorted ascending by pattern
    length then canonical token order.
    """

    rules: tuple[Rule, ...]
    fingerprint: str
    l_max: int
    l_tgt: int

    def __post_init__(self) -> None:
        seen: set[PrefixExpr] = set()
        normalized = []
        for rule in self.rules:
            rule = validate_rule(rule.pattern, rule.replacement)
            if rule.pattern in seen:
                raise ValueError(
                    f"duplicate pattern {format_prefix(rule.pattern)!r}")
            seen.add(rule.pattern)
            normalized.append(rule)
        normalized.sort(key=_rule_order)
        object.__setattr__(self, "rules", tuple(normalized))

    def __iter__(self) -> Iterator[Rule]:
        return iter(self.rules)

    def __len__(self) -> int:
        return len(self.rules)


# ---------------------------------------------------------------------------
# enumeration
# ---------------------------------------------------------------------------

def enumerate_expressions(
    length: int,
    alphabet: Alphabet | Iterable[int],
) -> Iterator[PrefixExpr]:
    """Yield every arity-consistent sequence of exactly `length` tokens.

    Accepts an Alphabet (pattern-side tokens, no placeholder) or any
    iterable of token ids.  Order is lexicographic by the canonical
    token order; each expression appears exactly once.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    if isinstance(alphabet, Alphabet):
        tokens: Sequence[int] = alphabet.operators + alphabet.leaf_tokens()
    else:
        tokens = tuple(alphabet)
    ordered = sorted(set(tokens), key=order_rank)
    deltas = sorted({arity(t) - 1 for t in ordered})

    # feasible[r] = open-slot counts closable in exactly r more tokens
    feasible: list[set[int]] = [set() for _ in range(length + 1)]
    feasible[0].add(0)
    for r in range(1, length + 1):
        prev = feasible[r - 1]
        for d in range(1, r + 1):
            if any(d + delta in prev for delta in deltas):
                feasible[r].add(d)

    buf: list[int] = []

    def rec(deficit: int, rem: int) -> Iterator[PrefixExpr]:
        if rem == 0:
            yield tuple(buf)
            return
        nxt = feasible[rem - 1]
        for t in ordered:
            nd = deficit - 1 + arity(t)
            if nd in nxt:
                buf.append(t)
                yield from rec(nd, rem - 1)
                buf.pop()

    yield from rec(1, length)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

class RulesFileError(Exception):
    """Base class for rules-file load failures."""


class VersionMismatch(RulesFileError):
    pass


class AlphabetMismatch(RulesFileError):
    pass


class ParseError(RulesFileError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _render_rules(rule_set: RuleSet) -> str:
    lines = [
        f"#version {FORMAT_VERSION}",
        f"#alphabet {rule_set.fingerprint}",
        f"#lmax {rule_set.l_max}",
        f"#ltgt {rule_set.l_tgt}",
    ]
    for rule in rule_set.rules:
        lines.append(
            f"{format_prefix(rule.pattern)} => {format_prefix(rule.replacement)}")
    return "\n".join(lines) + "\n"


def save_rules(rule_set: RuleSet, destination) -> int:
    """Write the canonical text form; returns the byte count written."""
    text = _render_rules(rule_set)
    data = text.encode("utf-8")
    if hasattr(destination, "write"):
        destination.write(text)
    else:
        with open(destination, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    return len(data)


def _header_payload(lines: list[str], idx: int, tag: str) -> str:
    if idx >= len(lines) or not lines[idx].startswith(tag):
        raise ParseError(f"expected {tag!r} header", line=idx + 1)
    return lines[idx][len(tag):].strip()


def _parse_side(text: str, line_no: int) -> PrefixExpr:
    try:
        return parse_prefix(text)
    except (ExpressionError, ValueError) as exc:
        raise ParseError(str(exc), line=line_no) from exc


def load_rules(source, alphabet: Alphabet | None = None) -> RuleSet:
    """Parse a rules file from a path or text file object.

    When an alphabet is supplied its fingerprint must match the file
    header.  Every rule line is re-validated against the rule
    invariants; failures raise ParseError with the offending line.
    """
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, "r", encoding="utf-8") as fh:
            text = fh.read()
    lines = text.splitlines()

    version = _header_payload(lines, 0, "#version")
    if version != str(FORMAT_VERSION):
        raise VersionMismatch(
            f"rules file version {version!r}; this engine reads version "
            f"{FORMAT_VERSION}")
    fingerprint = _header_payload(lines, 1, "#alphabet")
    if alphabet is not None and fingerprint != alphabet.fingerprint():
        raise AlphabetMismatch(
            f"rules were discovered under alphabet {fingerprint}, not "
            f"{alphabet.fingerprint()}")
    try:
        l_max = int(_header_payload(lines, 2, "#lmax"))
    except ValueError as exc:
        raise ParseError("malformed #lmax header", line=3) from exc
    try:
        l_tgt = int(_header_payload(lines, 3, "#ltgt"))
    except ValueError as exc:
        raise ParseError("malformed #ltgt header", line=4) from exc

    rules: list[Rule] = []
    seen: set[PrefixExpr] = set()
    for offset, raw in enumerate(lines[4:]):
        line_no = offset + 5
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=>" not in line:
            raise ParseError("missing '=>' separator", line=line_no)
        left, _, right = line.partition("=>")
        pattern = _parse_side(left, line_no)
        replacement = _parse_side(right, line_no)
        try:
            rule = validate_rule(pattern, replacement)
        except ValueError as exc:
            raise ParseError(str(exc), line=line_no) from exc
        if rule.pattern in seen:
            raise ParseError(
                f"duplicate pattern {format_prefix(rule.pattern)!r}",
                line=line_no)
        seen.add(rule.pattern)
        rules.append(rule)

    return RuleSet(tuple(rules), fingerprint, l_max, l_tgt)


# ---------------------------------------------------------------------------
# numeric screening
# ---------------------------------------------------------------------------
# The probe grid has 16 near rows spanning mixed signs and magnitudes
# (including enough rows >= 1 for acosh-like domains and none exactly at
# 0 or +-1) and 16 wide rows out to +-12 that separate expressions
# agreeing only on a narrow window.

_NEAR = (0.3, 0.7, 1.3, 1.9, 2.6, 3.4, -0.4, -1.1,
         -2.2, -3.1, 0.05, 5.5, -5.5, 1.05, 8.0, -0.9)
_WIDE = (1.5, -2.8, 4.2, -5.7, 7.3, -9.1, 10.6, -12.0,
         2.2, -1.7, 6.4, -4.9, 11.3, -7.6, 3.8, -10.2)
_ROWS = 32
_PROBE_ROWS = (0, 7, 16, 24)

# 15-bit bin codes per probe, packed four to an int64; bins saturate for
# huge magnitudes, which only coarsens the shortlist near the clip
_BIAS = 1 << 14
_CODE_NAN = (1 << 15) - 1
_CODE_PINF = (1 << 15) - 2
_CODE_NINF = (1 << 15) - 3
_BIN_LIMIT = _BIAS - 8


def _screen_matrix(n_vars: int) -> np.ndarray:
    cols = max(n_vars, 1)
    X = np.empty((_ROWS, cols))
    for k in range(cols):
        X[:16, k] = np.roll(_NEAR, k % 16)
        X[16:, k] = np.roll(_WIDE, k % 16)
    return X[:, :n_vars] if n_vars else X[:, :0]


def _leaf_image(token: int, X: np.ndarray) -> np.ndarray:
    if is_variable(token):
        return X[:, var_index(token) - 1].copy()
    return np.full(X.shape[0], literal_value(token))


def _bin_codes(values: np.ndarray, scale: float) -> np.ndarray:
    """Quantized arcsinh bins; non-finite values get reserved codes."""
    with np.errstate(all="ignore"):
        z = np.round(np.arcsinh(values) * scale)
    codes = np.clip(np.nan_to_num(z, nan=0.0, posinf=0.0, neginf=0.0),
                    -_BIN_LIMIT, _BIN_LIMIT).astype(np.int64) + _BIAS
    codes = np.where(np.isnan(values), _CODE_NAN, codes)
    codes = np.where(values == np.inf, _CODE_PINF, codes)
    codes = np.where(values == -np.inf, _CODE_NINF, codes)
    return codes


def _pack_codes(codes: np.ndarray) -> np.ndarray:
    return ((codes[..., 0] << 45) | (codes[..., 1] << 30)
            | (codes[..., 2] << 15) | codes[..., 3])


def _image_keys(images: np.ndarray, scale: float) -> np.ndarray:
    """One int64 hash key per image row set; images is (n, _ROWS)."""
    probes = images[:, list(_PROBE_ROWS)]
    return _pack_codes(_bin_codes(probes, scale))


# Placeholder families: length-3 candidates with one fitted constant.
# For each family the statistic is constant across probe rows exactly
# when the pool expression lies in the family; dominated orderings
# (e.g. the placeholder-first form of a commutative operator) are
# omitted because the kept form always wins the selection tie-break.

def _fam_add_xc(Y: np.ndarray, x: np.ndarray):
    s = Y - x
    return s, np.isfinite(s)


def _fam_sub_cx(Y: np.ndarray, x: np.ndarray):
    s = Y + x
    return s, np.isfinite(s)


def _fam_mul_xc(Y: np.ndarray, x: np.ndarray):
    with np.errstate(all="ignore"):
        s = Y / x
    return s, np.isfinite(s) & (np.abs(x) > 1e-8)


def _fam_div_cx(Y: np.ndarray, x: np.ndarray):
    with np.errstate(all="ignore"):
        s = Y * x
    return s, np.isfinite(s)


def _fam_pow_xc(Y: np.ndarray, x: np.ndarray):
    with np.errstate(all="ignore"):
        lx = np.log(np.abs(x))
        s = np.log(np.abs(Y)) / lx
    valid = np.isfinite(s) & (np.abs(lx) > 0.1) & (np.abs(Y) > 1e-12)
    return s, valid


def _fam_pow_cx(Y: np.ndarray, x: np.ndarray):
    with np.errstate(all="ignore"):
        s = np.log(Y) / x
    valid = np.isfinite(s) & (np.abs(x) > 0.1) & (Y > 1e-12)
    return s, valid


# (operator, placeholder-first, row statistic, constant from median stat)
_FAMILIES: tuple[tuple[str, bool, Callable, Callable], ...] = (
    ("+", False, _fam_add_xc, lambda m: m),     # x + c
    ("-", True, _fam_sub_cx, lambda m: m),      # c - x
    ("*", False, _fam_mul_xc, lambda m: m),     # x * c
    ("/", True, _fam_div_cx, lambda m: m),      # c / x
    ("pow", False, _fam_pow_xc, lambda m: m),   # x ^ c
    ("pow", True, _fam_pow_cx, np.exp),         # c ^ x
)

_FAM_ATOL = 1e-4
_FAM_RTOL = 1e-3
_FAM_QUORUM = 3


def _row_constant(stat: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Rows of `stat` that are near-constant over their valid entries."""
    count = valid.sum(axis=1)
    with np.errstate(all="ignore"):
        hi = np.max(np.where(valid, stat, -np.inf), axis=1)
        lo = np.min(np.where(valid, stat, np.inf), axis=1)
        mid = np.where(valid, stat, 0.0).sum(axis=1) / np.maximum(count, 1)
        spread_ok = (hi - lo) <= _FAM_ATOL + _FAM_RTOL * np.abs(mid)
    return (count >= _FAM_QUORUM) & spread_ok & np.isfinite(mid)


class _Candidate(NamedTuple):
    tokens: PrefixExpr
    var_mask: int
    n_consts: int
    image: np.ndarray | None   # (_ROWS,) for constant-free candidates
    order: tuple               # canonical tie-break key


def _var_mask(tokens: Sequence[int]) -> int:
    mask = 0
    for t in tokens:
        if is_variable(t):
            mask |= 1 << (t - vocab.VAR_BASE)
    return mask


# structural shape codes let candidate images on a fresh point set be
# composed in batches (grouped kernel calls over shared leaf images)
_SHAPE_LEAF, _SHAPE_U1, _SHAPE_U2, _SHAPE_BIN, _SHAPE_OTHER = range(5)


def _shape_code(toks: PrefixExpr,
                leaf_row: dict[int, int]) -> tuple[int, int, int, int, int]:
    n = len(toks)
    if n == 1:
        return (_SHAPE_LEAF, -1, -1, leaf_row[toks[0]], -1)
    if n == 2:
        return (_SHAPE_U1, toks[0], -1, leaf_row[toks[1]], -1)
    if n == 3 and arity(toks[0]) == 1:
        return (_SHAPE_U2, toks[0], toks[1], leaf_row[toks[2]], -1)
    if n == 3:
        return (_SHAPE_BIN, toks[0], -1, leaf_row[toks[1]], leaf_row[toks[2]])
    return (_SHAPE_OTHER, -1, -1, -1, -1)


def _stage_images(ids: np.ndarray, ctx: _ScreenContext, leaf_im: np.ndarray,
                  X_stage: np.ndarray) -> np.ndarray:
    """Images of constant-free candidates on a small point set, batched.

    Inner unary images are materialized for every (operator, leaf) pair
    present so each outer operator costs one kernel call.
    """
    n_leaves = leaf_im.shape[0]
    out = np.empty((ids.size, X_stage.shape[0]))
    kinds = ctx.ckind[ids]
    ops0, leafs = ctx.cops[ids, 0], ctx.cleaf[ids, 0]

    m = kinds == _SHAPE_LEAF
    if m.any():
        out[m] = leaf_im[leafs[m]]

    m = kinds == _SHAPE_U1
    if m.any():
        sel = np.nonzero(m)[0]
        for op in np.unique(ops0[sel]):
            g = sel[ops0[sel] == op]
            out[g] = apply_kernel(int(op), leaf_im[leafs[g]])

    m = kinds == _SHAPE_U2
    if m.any():
        sel = np.nonzero(m)[0]
        inner_ops = ctx.cops[ids[sel], 1]
        inner_rows = np.empty(sel.size, dtype=np.int64)
        blocks = []
        for k, op in enumerate(np.unique(inner_ops)):
            g = inner_ops == op
            blocks.append(apply_kernel(int(op), leaf_im))
            inner_rows[g] = k * n_leaves + leafs[sel[g]]
        inner_im = np.concatenate(blocks, axis=0)
        for op in np.unique(ops0[sel]):
            g = ops0[sel] == op
            out[sel[g]] = apply_kernel(int(op), inner_im[inner_rows[g]])

    m = kinds == _SHAPE_BIN
    if m.any():
        sel = np.nonzero(m)[0]
        for op in np.unique(ops0[sel]):
            g = sel[ops0[sel] == op]
            out[g] = apply_kernel(
                int(op), leaf_im[leafs[g]], leaf_im[ctx.cleaf[ids[g], 1]])

    for i in np.nonzero(kinds == _SHAPE_OTHER)[0]:
        plan = _cached_plan(ctx.table[int(ids[i])].tokens)
        out[i] = evaluate(plan, X_stage)
    return out


@dataclass
class _ScreenContext:
    """Per-discovery candidate table plus the vectorized screen state."""

    table: list[_Candidate]
    hash_map: dict[int, tuple[int, ...]]
    sorted_keys: np.ndarray
    const_cid: int
    fams: list[tuple[int, np.ndarray, Callable]]  # (cid, x column, stat fn)
    probes: dict[int, Callable]  # cid -> estimated image for one row, or None
    im_matrix: np.ndarray        # (const_cid, rows) constant-free images
    allnan_im: np.ndarray        # (const_cid,) image is NaN on every row
    lens: np.ndarray             # (n_table,) candidate token counts
    masks: np.ndarray            # (n_table,) candidate variable masks
    leaves: tuple[int, ...]      # leaf tokens, fixed order
    ckind: np.ndarray            # (const_cid,) structural shape code
    cops: np.ndarray             # (const_cid, 2) operator ids by shape
    cleaf: np.ndarray            # (const_cid, 2) leaf rows by shape
    scale: float
    atol1: float                 # tight pre-check, constant-free candidates
    rtol1: float
    atol2: float                 # loose check, estimated-placeholder images
    rtol2: float


def _build_screen(alphabet: Alphabet, l_tgt: int, X: np.ndarray,
                  cfg: EquivalenceConfig) -> _ScreenContext:
    # hash bins sized so protocol-close images land in the same or an
    # adjacent bin, whatever tolerances the caller picked
    slack = max(cfg.atol + cfg.rtol, 1e-9)
    scale = min(1024.0, 0.125 / slack)
    atol1 = max(1e-8, 10.0 * cfg.atol)
    rtol1 = max(1e-6, 10.0 * cfg.rtol)
    atol2 = max(1e-4, 100.0 * cfg.atol)
    rtol2 = max(1e-2, 100.0 * cfg.rtol)

    leaves = tuple(alphabet.leaf_tokens())
    leaf_row = {t: i for i, t in enumerate(leaves)}

    table: list[_Candidate] = []
    grouped: dict[int, list[int]] = {}
    shapes: list[tuple[int, int, int, int, int]] = []
    for j in range(1, l_tgt + 1):
        for toks in enumerate_expressions(j, alphabet):
            image = evaluate(compile_expr(toks), X)
            cid = len(table)
            table.append(_Candidate(
                toks, _var_mask(toks), 0, image, canonical_key(toks)))
            shapes.append(_shape_code(toks, leaf_row))
            codes = _bin_codes(image[list(_PROBE_ROWS)], scale)
            offset_sets = [
                (0,) if c >= _BIN_LIMIT + _BIAS else (-1, 0, 1) for c in codes
            ]
            for offs in itertools.product(*offset_sets):
                key = int(_pack_codes(codes + np.array(offs, dtype=np.int64)))
                grouped.setdefault(key, []).append(cid)

    probes: dict[int, Callable] = {}

    const_cid = len(table)
    table.append(_Candidate((CONST,), 0, 1, None, canonical_key((CONST,))))
    probes[const_cid] = lambda y: np.full(_ROWS, float(y[np.isfinite(y)].mean())) \
        if np.isfinite(y).any() else None

    fams: list[tuple[int, np.ndarray, Callable]] = []
    if l_tgt >= 3:
        op_ids = set(alphabet.operators)
        for name, const_first, stat_fn, finish in _FAMILIES:
            op = vocab.op_id(name)
            if op not in op_ids:
                continue
            for v in alphabet.variables:
                toks = (op, CONST, v) if const_first else (op, v, CONST)
                cid = len(table)
                table.append(_Candidate(
                    toks, _var_mask(toks), 1, None, canonical_key(toks)))
                x_col = X[:, var_index(v) - 1]
                fams.append((cid, x_col, stat_fn))
                plan = compile_expr(toks)

                def probe(y, x_col=x_col, stat_fn=stat_fn, finish=finish,
                          plan=plan):
                    stat, valid = stat_fn(y[None, :], x_col)
                    vals = stat[0][valid[0]]
                    if not vals.size:
                        return None
                    with np.errstate(all="ignore"):
                        c = float(finish(float(np.median(vals))))
                    return evaluate(plan, X, [c])

                probes[cid] = probe

    hash_map = {k: tuple(v) for k, v in grouped.items()}
    sorted_keys = np.array(sorted(hash_map), dtype=np.int64)
    im_matrix = (np.stack([c.image for c in table[:const_cid]])
                 if const_cid else np.empty((0, _ROWS)))
    lens = np.array([len(c.tokens) for c in table], dtype=np.int64)
    masks = np.array([c.var_mask for c in table], dtype=np.int64)
    shape_arr = np.array(shapes, dtype=np.int64).reshape(-1, 5)
    allnan_im = np.isnan(im_matrix).all(axis=1)
    return _ScreenContext(table, hash_map, sorted_keys, const_cid, fams,
                          probes, im_matrix, allnan_im, lens, masks,
                          leaves, shape_arr[:, 0], shape_arr[:, 1:3],
                          shape_arr[:, 3:5],
                          scale, atol1, rtol1, atol2, rtol2)


def _screen_block(Y: np.ndarray, ctx: _ScreenContext) -> dict[int, list[int]]:
    """Map block row -> candidate ids worth a full equivalence test."""
    short: dict[int, list[int]] = {}

    keys = _image_keys(Y, ctx.scale)
    if ctx.sorted_keys.size:
        pos = np.searchsorted(ctx.sorted_keys, keys)
        pos[pos == ctx.sorted_keys.size] = 0
        hits = ctx.sorted_keys[pos] == keys
        for i in np.nonzero(hits)[0]:
            ids = ctx.hash_map.get(int(keys[i]))
            if ids:
                short.setdefault(int(i), []).extend(ids)

    all_fin = np.isfinite(Y).all(axis=1)
    if all_fin.any():
        with np.errstate(all="ignore"):
            spread = np.ptp(Y, axis=1)
            mean = Y.mean(axis=1)
        const_rows = all_fin & (spread <= ctx.atol2 + ctx.rtol2 * np.abs(mean))
        for i in np.nonzero(const_rows)[0]:
            short.setdefault(int(i), []).append(ctx.const_cid)

    for cid, x_col, stat_fn in ctx.fams:
        stat, valid = stat_fn(Y, x_col)
        for i in np.nonzero(_row_constant(stat, valid))[0]:
            short.setdefault(int(i), []).append(cid)

    return short


# ---------------------------------------------------------------------------
# discovery
# ---------------------------------------------------------------------------

def equivalence_rng(seed: int, source: Sequence[int]) -> np.random.Generator:
    """Deterministic challenge generator for one scanned expression.

    Streams are keyed by the expression's content rather than its scan
    position, so the discovery outcome is invariant under any per-level
    scan order, and every candidate replacement for one expression faces
    the same challenges.
    """
    entropy = [seed & 0xFFFFFFFFFFFFFFFF, len(source), *source]
    return np.random.default_rng(np.random.SeedSequence(entropy))


@functools.lru_cache(maxsize=None)
def _cached_plan(tokens: PrefixExpr):
    return compile_expr(tokens)


#: rows of the shared challenge matrix compared before the full set
_STAGE_ROWS = 8


def _resolve(tokens: PrefixExpr, y: np.ndarray, cand_ids: Iterable[int],
             ctx: _ScreenContext, cfg: EquivalenceConfig, seed: int,
             l_tgt: int) -> Rule | None:
    """Pick the replacement for one irreducible expression, if any.

    Candidates are grouped by length ascending; at the first length with
    any protocol-equivalent candidate the one with the fewest
    placeholders wins, ties broken by canonical token order.
    """
    limit = min(len(tokens) - 1, l_tgt)
    vm = _var_mask(tokens)
    ids = np.fromiter(cand_ids, dtype=np.int64, count=len(cand_ids))
    ids = ids[(ctx.lens[ids] <= limit) & ((ctx.masks[ids] & ~vm) == 0)]
    if not ids.size:
        return None

    # constant-free candidates carry exact images: one vectorized pass
    free = ids[ids < ctx.const_cid]
    if free.size:
        if np.isnan(y).all():
            # the extended check against an all-NaN row keeps exactly the
            # all-NaN images, which is a precomputed column
            free = free[ctx.allnan_im[free]]
        else:
            ok = extended_close_mask(
                y[None, :], ctx.im_matrix[free], ctx.atol1, ctx.rtol1,
            ).all(axis=1)
            free = free[ok]

    # challenges are shared by every candidate for this expression, so a
    # constant-free decision is one extended comparison on that matrix;
    # survivors of a batched check on a few informative rows pay for the
    # full comparison
    X_ch = Y_src = None
    if free.size:
        src_plan = _cached_plan(tokens)
        rng = equivalence_rng(seed, tokens)
        dims = max(1, src_plan.n_vars_required)
        X_ch = rng.normal(0.0, cfg.sigma, (cfg.rows, dims))
        Y_src = evaluate(src_plan, X_ch)
        stage = np.nonzero(~np.isnan(Y_src))[0][:_STAGE_ROWS]
        if stage.size:
            X_stage = X_ch[stage]
            leaf_im = np.stack([
                _leaf_image(t, X_stage)
                if not is_variable(t) or var_index(t) <= dims
                else np.full(stage.size, np.nan)
                for t in ctx.leaves
            ])
            imgs = _stage_images(free, ctx, leaf_im, X_stage)
            keep = extended_close_mask(
                Y_src[stage][None, :], imgs, cfg.atol, cfg.rtol,
            ).all(axis=1)
            free = free[keep]

    ids = np.concatenate([free, ids[ids >= ctx.const_cid]])
    if not ids.size:
        return None

    for j in sorted(set(ctx.lens[ids])):
        passers = []
        for cid in ids[ctx.lens[ids] == j]:
            cand = ctx.table[cid]
            if cand.image is None:
                # estimate the placeholder from the row itself; a genuine
                # member reproduces the row to well under these tolerances
                probe = ctx.probes.get(int(cid))
                image = probe(y) if probe is not None else None
                if image is not None and not extended_close_mask(
                        y, image, ctx.atol1, ctx.rtol1).all():
                    continue
                rng = equivalence_rng(seed, tokens)
                if equivalent(tokens, cand.tokens, cfg, seed=rng):
                    passers.append(cand)
                continue
            y_cand = evaluate(_cached_plan(cand.tokens), X_ch)
            if extended_close_mask(y_cand, Y_src, cfg.atol, cfg.rtol).all():
                passers.append(cand)
        if passers:
            best = min(passers, key=lambda c: (c.n_consts, c.order))
            return Rule(tokens, best.tokens)
    return None


def _level_chunks(level: int, alphabet: Alphabet,
                  irr_tokens: dict[int, list[PrefixExpr]],
                  irr_images: dict[int, np.ndarray],
                  chunk_rows: int = 1 << 18):
    """Yield (make_tokens, count, images) chunks composing one level.

    Chunks appear in a fixed order: operators by table order, binary
    splits by left length, then row-major over child indices.
    """
    for op in alphabet.operators:
        if arity(op) == 1:
            src = irr_tokens.get(level - 1, [])
            if not src:
                continue
            images = irr_images[level - 1]
            for lo in range(0, len(src), chunk_rows):
                hi = min(lo + chunk_rows, len(src))
                Y = apply_kernel(op, images[lo:hi])

                def make(i: int, op=op, src=src, lo=lo) -> PrefixExpr:
                    return (op,) + src[lo + i]

                yield make, hi - lo, Y
        else:
            for la in range(1, level - 1):
                lb = level - 1 - la
                sa = irr_tokens.get(la, [])
                sb = irr_tokens.get(lb, [])
                if not sa or not sb:
                    continue
                A, B = irr_images[la], irr_images[lb]
                nb = len(sb)
                step = max(1, chunk_rows // nb)
                for a0 in range(0, len(sa), step):
                    a1 = min(a0 + step, len(sa))
                    Y = apply_kernel(
                        op, A[a0:a1, None, :], B[None, :, :],
                    ).reshape(-1, _ROWS)

                    def make(i: int, op=op, sa=sa, sb=sb, nb=nb,
                             a0=a0) -> PrefixExpr:
                        return (op,) + sa[a0 + i // nb] + sb[i % nb]

                    yield make, (a1 - a0) * nb, Y


def discover_rules(
    alphabet: Alphabet,
    l_max: int = 7,
    l_tgt: int = 3,
    config: EquivalenceConfig | None = None,
    seed: int = 0,
    on_level: Callable[[int, int, int], None] | None = None,
) -> RuleSet:
    """Scan ascending expression lengths for shortening rewrites.

    For each level every composed expression that no current rule
    reduces is screened against candidate replacements of length at
    most min(len - 1, l_tgt) using the same variables; screened pairs
    are settled by the numeric equivalence protocol.  New rules merge
    only at the end of their level.  Deterministic for a given seed.
    """
    cfg = config or EquivalenceConfig()
    X = _screen_matrix(alphabet.n_vars)
    ctx = _build_screen(alphabet, l_tgt, X, cfg)

    leaves = [(t,) for t in alphabet.leaf_tokens()]
    irr_tokens: dict[int, list[PrefixExpr]] = {1: leaves}
    irr_images: dict[int, np.ndarray] = {
        1: np.stack([_leaf_image(t, X) for (t,) in leaves])
        if leaves else np.empty((0, _ROWS))
    }

    rules: list[Rule] = []
    index: RuleIndex = build_index(())

    for level in range(2, l_max + 1):
        level_rules: list[Rule] = []
        keep_tokens: list[PrefixExpr] = []
        keep_images: list[np.ndarray] = []
        pool_size = 0

        for make, count, Y in _level_chunks(level, alphabet, irr_tokens,
                                            irr_images):
            pool_size += count
            short = _screen_block(Y, ctx)
            for i, cand_ids in short.items():
                tokens = make(i)
                if lookup_rewrite(tokens, index) is not None:
                    continue
                rule = _resolve(tokens, Y[i], cand_ids, ctx, cfg, seed, l_tgt)
                if rule is not None:
                    level_rules.append(rule)
            if level < l_max:
                keep_tokens.extend(make(i) for i in range(count))
                keep_images.append(Y)

        rules.extend(level_rules)
        index = build_index(rules)

        if level < l_max:
            images = (np.concatenate(keep_images)
                      if keep_images else np.empty((0, _ROWS)))
            alive = [i for i, t in enumerate(keep_tokens)
                     if lookup_rewrite(t, index) is None]
            irr_tokens[level] = [keep_tokens[i] for i in alive]
            irr_images[level] = images[alive] if alive else np.empty((0, _ROWS))

        if on_level is not None:
            on_level(level, pool_size, len(level_rules))

    return RuleSet(tuple(rules), alphabet.fingerprint(), l_max, l_tgt)
