"""Synthetic training-sample pipeline for symbolic-regression models.

Samples expression skeletons from a weighted operator law, normalizes
them with the simplification engine, rejects skeletons that collide
with a hold-out set up to constant values, and synthesizes numeric
datasets with typed rejection accounting.  Every stage is driven by an
explicit RNG so an instance stream replays exactly from its seed.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from typing import Iterable, Iterator, Sequence, TextIO, Union

import numpy as np

from . import vocab
from .vocab import CONST, arity, is_const, is_variable
from .expr import (
    count_constants,
    format_prefix,
    parse_prefix,
    prune_constants,
    validate,
)
from .evaluate import compile_expr, evaluate
from .simplify import RuleIndex, simplify

__all__ = [
    "GenConfig",
    "HoldoutIndex",
    "TrainingInstance",
    "SimplifiedToNonFinite",
    "Degenerate",
    "Contaminated",
    "DataRejected",
    "Rejection",
    "sample_n_ops",
    "sample_skeleton",
    "build_holdout_index",
    "is_contaminated",
    "sample_instance",
    "generate_stream",
    "instance_seed",
    "write_dataset",
    "read_dataset",
    "read_holdout",
]


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GenConfig:
    """Sampling law for one generation run; serialized into file headers."""

    dims: int
    seed: int = 0
    alpha: float = 0.7
    lam: float = 1.0
    n_ops_max: int = 17
    max_symbols: int = 35
    const_sigma: float = 5.0
    domain_sigma: float = 10.0
    m_max: int = 1024
    resample_limit: int = 4
    l_max: int = 4

    def __post_init__(self):
        if not 1 <= self.dims <= vocab.MAX_VARIABLES:
            raise ValueError(f"dims must be in [1, {vocab.MAX_VARIABLES}]")
        if self.n_ops_max < 0 or self.max_symbols < 1:
            raise ValueError("negative size bound")
        for name in ("lam", "const_sigma", "domain_sigma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.m_max < 1 or self.resample_limit < 0 or self.l_max < 1:
            raise ValueError("degenerate sampling bound")

    def to_json(self) -> str:
        return json.dumps(
            {f.name: getattr(self, f.name) for f in fields(self)},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "GenConfig":
        return cls(**json.loads(text))


# ---------------------------------------------------------------------------
# operator-count law
# ---------------------------------------------------------------------------

def _nops_pmf(cfg: GenConfig) -> np.ndarray:
    n = np.arange(cfg.n_ops_max + 1, dtype=np.float64)
    w = np.exp(n ** cfg.alpha / cfg.lam)
    return w / w.sum()


def sample_n_ops(rng: np.random.Generator, cfg: GenConfig,
                 size: int | None = None) -> Union[int, np.ndarray]:
    """Draw operator counts from p(n) proportional to exp(n^alpha / lam).

    The law is truncated to [0, n_ops_max].  With `size` given, returns
    that many iid draws as an array (one RNG consumption pattern either
    way: inverse-CDF on uniforms).
    """
    cdf = np.cumsum(_nops_pmf(cfg))
    u = rng.random() if size is None else rng.random(size)
    # rounding can leave cdf[-1] a hair under 1.0; clamp the tail draw
    out = np.minimum(np.searchsorted(cdf, u, side="right"), cfg.n_ops_max)
    return int(out) if size is None else out


# ---------------------------------------------------------------------------
# skeleton sampling
# ---------------------------------------------------------------------------
# Tree shapes follow the classic unary-binary enumeration: D(e, n) counts
# the distinct ways to finish a tree that still has e open slots and n
# operators left to place, scanning slots left to right.

_D_MAX_E = 40
_D_MAX_N = 64
_d_table: list[list[int]] | None = None


def _shape_counts() -> list[list[int]]:
    global _d_table
    if _d_table is None:
        d = [[0] * (_D_MAX_N + 1) for _ in range(_D_MAX_E + 1)]
        for e in range(_D_MAX_E + 1):
            d[e][0] = 1
        for n in range(1, _D_MAX_N + 1):
            for e in range(1, _D_MAX_E + 1):
                up = d[e + 1][n - 1] if e + 1 <= _D_MAX_E else 0
                d[e][n] = d[e - 1][n] + d[e][n - 1] + up
        _d_table = d
    return _d_table


_EMPTY = -1   # open slot, eligible for the next operator
_LEAF = -2    # slot passed over; finalized as a leaf


def _operator_pool() -> tuple[np.ndarray, np.ndarray]:
    ops = np.arange(vocab.N_OPERATORS, dtype=np.int64)
    w = np.array([info.weight for info in vocab.OPERATORS], dtype=np.float64)
    return ops, np.cumsum(w / w.sum())


def _sample_shape(rng: np.random.Generator, n_ops: int) -> list[int]:
    """Place n_ops weighted operators into a growing slot list.

    Each step draws the operator first (so operator frequencies follow
    the vocabulary weights exactly), then the slot position conditioned
    on the operator's arity through the shape-count law.
    """
    d = _shape_counts()
    ops, op_cdf = _operator_pool()
    out: list[int] = [_EMPTY]
    for remaining in range(n_ops, 0, -1):
        op = int(ops[np.searchsorted(op_cdf, rng.random(), side="right")])
        a = arity(op)
        slots = [i for i, t in enumerate(out) if t == _EMPTY]
        weights = [d[len(slots) - k - 1 + a][remaining - 1] for k in
                   range(len(slots))]
        total = sum(weights)
        pick = rng.random() * total
        acc = 0.0
        k = len(slots) - 1
        for idx, w in enumerate(weights):
            acc += w
            if pick < acc:
                k = idx
                break
        for i in slots[:k]:
            out[i] = _LEAF
        out[slots[k]:slots[k] + 1] = [op] + [_EMPTY] * a
    return out


def sample_skeleton(rng: np.random.Generator, cfg: GenConfig) -> tuple[int, ...]:
    """Sample one skeleton: weighted tree shape, then leaf assignment.

    Leaves draw n_var distinct symbols from the variables plus the
    constant placeholder, duplicate them to the leaf count, and shuffle.
    """
    pool = [vocab.VAR_BASE + i for i in range(cfg.dims)] + [CONST]
    for _ in range(64):
        n_ops = sample_n_ops(rng, cfg)
        shape = _sample_shape(rng, n_ops)
        slots = [i for i, t in enumerate(shape) if t < 0]
        n_leaves = len(slots)
        n_var = int(rng.integers(1, min(n_leaves, cfg.dims) + 1))
        chosen = list(rng.choice(len(pool), size=n_var, replace=False))
        extra = rng.integers(0, n_var, size=n_leaves - n_var)
        symbols = [pool[i] for i in chosen]
        symbols += [pool[chosen[i]] for i in extra]
        perm = rng.permutation(n_leaves)
        for slot, j in zip(slots, perm):
            shape[slot] = symbols[j]
        if len(shape) <= cfg.max_symbols:
            return validate(shape)
    raise RuntimeError("skeleton sampling failed to satisfy size bounds")


# ---------------------------------------------------------------------------
# decontamination
# ---------------------------------------------------------------------------

_CHECK_ROWS = 512
_CHECK_LOW = -10.0
_CHECK_HIGH = 10.0
_CHECK_TOL = 1.0e-4


@dataclass(frozen=True)
class HoldoutIndex:
    """Pruned hold-out skeletons with precomputed probe images.

    Entries are bucketed by their pruned variable set; a candidate is
    compared only against entries using exactly the same variables,
    which leaves the match decision unchanged (images over distinct
    variable sets cannot agree pointwise except on measure-zero probe
    draws) while bounding the comparison cost.
    """

    dims: int
    x_check: np.ndarray
    pruned: tuple[tuple[int, ...], ...]
    buckets: dict[frozenset, np.ndarray] = field(repr=False)


def build_holdout_index(skeletons: Iterable[Sequence[int]], dims: int,
                        seed: int = 0) -> HoldoutIndex:
    """Prune every hold-out skeleton and image it on a shared probe grid."""
    rng = np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1)]))
    x_check = rng.uniform(_CHECK_LOW, _CHECK_HIGH, size=(_CHECK_ROWS, dims))
    pruned: list[tuple[int, ...]] = []
    grouped: dict[frozenset, list[np.ndarray]] = {}
    for skeleton in skeletons:
        p = prune_constants(validate(skeleton))
        image = evaluate(compile_expr(p), x_check)
        pruned.append(p)
        grouped.setdefault(frozenset(t for t in p if is_variable(t)),
                           []).append(image)
    buckets = {k: np.stack(v) for k, v in grouped.items()}
    return HoldoutIndex(dims, x_check, tuple(pruned), buckets)


def is_contaminated(candidate: Sequence[int], index: HoldoutIndex) -> bool:
    """True when the constant-pruned candidate matches a hold-out image.

    A hold-out entry matches when every probe row satisfies
    |difference| <= 1e-4, or the values are equal (covers shared
    infinities), or either side is NaN.
    """
    p = prune_constants(validate(candidate))
    bucket = index.buckets.get(frozenset(t for t in p if is_variable(t)))
    if bucket is None:
        return False
    y = evaluate(compile_expr(p), index.x_check)
    with np.errstate(invalid="ignore"):
        close = np.abs(bucket - y) <= _CHECK_TOL
    match = close | (bucket == y) | np.isnan(bucket) | np.isnan(y)
    return bool(match.all(axis=1).any())


# ---------------------------------------------------------------------------
# instance synthesis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingInstance:
    """One accepted sample: normalized skeleton plus a numeric dataset."""

    skeleton: tuple[int, ...]
    constants: tuple[float, ...]
    x: np.ndarray
    y: np.ndarray


@dataclass(frozen=True)
class Rejection:
    """Base of the typed rejection results; kind() names the counter."""

    skeleton: tuple[int, ...]

    @classmethod
    def kind(cls) -> str:
        return cls.__name__


@dataclass(frozen=True)
class SimplifiedToNonFinite(Rejection):
    simplified: tuple[int, ...]


@dataclass(frozen=True)
class Degenerate(Rejection):
    simplified: tuple[int, ...]


@dataclass(frozen=True)
class Contaminated(Rejection):
    simplified: tuple[int, ...]


@dataclass(frozen=True)
class DataRejected(Rejection):
    simplified: tuple[int, ...]
    attempts: int


RejectionResult = Union[SimplifiedToNonFinite, Degenerate, Contaminated,
                        DataRejected]

_NONFINITE_LITS = frozenset(
    tok for tok, v in vocab.LITERAL_VALUES.items() if not math.isfinite(v)
)


def sample_instance(rng: np.random.Generator, cfg: GenConfig,
                    index: HoldoutIndex, rules: RuleIndex,
                    ) -> Union[TrainingInstance, RejectionResult]:
    """Run the full pipeline once: skeleton, normalize, screen, data.

    Rejections are ordinary return values so a caller can account for
    every outcome; only invalid arguments raise.  The rule index is
    expected to be capped at the configured pattern length already.
    """
    skeleton = sample_skeleton(rng, cfg)
    simplified = simplify(skeleton, rules)
    if any(t in _NONFINITE_LITS for t in simplified):
        return SimplifiedToNonFinite(skeleton, simplified)
    if not any(is_variable(t) or is_const(t) for t in simplified):
        return Degenerate(skeleton, simplified)
    if is_contaminated(simplified, index):
        return Contaminated(skeleton, simplified)

    plan = compile_expr(simplified)
    n_const = count_constants(simplified)
    for attempt in range(1 + cfg.resample_limit):
        m = int(rng.integers(1, cfg.m_max + 1))
        ends = rng.normal(0.0, cfg.domain_sigma, size=(2, cfg.dims))
        lows, highs = ends.min(axis=0), ends.max(axis=0)
        x = rng.uniform(lows, highs, size=(m, cfg.dims))
        constants = rng.normal(0.0, cfg.const_sigma, size=n_const)
        y = evaluate(plan, x, constants)
        if np.isfinite(y).all():
            return TrainingInstance(simplified, tuple(map(float, constants)),
                                    x, y)
    return DataRejected(skeleton, simplified, 1 + cfg.resample_limit)


def instance_seed(seed: int, counter: int) -> np.random.SeedSequence:
    """Derive the per-instance RNG root: worker-count independent."""
    return np.random.SeedSequence([seed & (2**64 - 1), counter])


def generate_stream(cfg: GenConfig, index: HoldoutIndex, rules: RuleIndex,
                    ) -> Iterator[tuple[int, Union[TrainingInstance,
                                                   RejectionResult]]]:
    """Yield (counter, outcome) forever; outcome order is by counter.

    Each instance runs on its own RNG derived from (seed, counter), so
    the stream is reproducible and arbitrarily parallelizable.
    """
    counter = 0
    while True:
        rng = np.random.default_rng(instance_seed(cfg.seed, counter))
        yield counter, sample_instance(rng, cfg, index, rules)
        counter += 1


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def write_dataset(out: TextIO, cfg: GenConfig,
                  instances: Iterable[TrainingInstance]) -> int:
    """Write the header and instance records; returns instances written.

    Floats are rendered with repr (shortest exact round-trip), so a
    rewrite of the same stream is byte-identical.
    """
    out.write(f"# {cfg.to_json()}\n")
    n = 0
    for inst in instances:
        out.write(f"> {format_prefix(inst.skeleton)}\n")
        out.write("c" + "".join(f" {float(v)!r}" for v in inst.constants)
                  + "\n")
        for xi, yi in zip(inst.x, inst.y):
            row = " ".join(repr(float(v)) for v in xi)
            out.write(f"{row} {float(yi)!r}\n")
        n += 1
    return n


def read_dataset(source: TextIO) -> tuple[GenConfig, list[TrainingInstance]]:
    """Parse a dataset stream written by write_dataset."""
    header = source.readline()
    if not header.startswith("# "):
        raise ValueError("missing dataset header")
    cfg = GenConfig.from_json(header[2:])
    instances: list[TrainingInstance] = []
    skeleton: tuple[int, ...] | None = None
    constants: tuple[float, ...] = ()
    rows: list[list[float]] = []

    def flush():
        if skeleton is None:
            return
        data = np.array(rows, dtype=np.float64).reshape(len(rows),
                                                        cfg.dims + 1)
        instances.append(TrainingInstance(
            skeleton, constants, data[:, :-1].copy(), data[:, -1].copy()))

    for line in source:
        line = line.strip()
        if not line:
            continue
        if line.startswith("> "):
            flush()
            skeleton = parse_prefix(line[2:])
            constants, rows = (), []
        elif line.startswith("c"):
            constants = tuple(float(v) for v in line[1:].split())
        else:
            rows.append([float(v) for v in line.split()])
    flush()
    return cfg, instances


def read_holdout(source: TextIO) -> list[tuple[int, ...]]:
    """Read one hold-out skeleton per line; blank and # lines skip."""
    out = []
    for line in source:
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(parse_prefix(line))
    return out
