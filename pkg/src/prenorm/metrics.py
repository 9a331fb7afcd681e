"""Evaluation battery for symbolic-regression predictions.

Compares predicted and ground-truth skeletons structurally (exact match,
token F1, tree edit distance, nesting depth, constant and variable
accounting) and summarizes numeric fits (recovery rate at float32
precision, bootstrap confidence intervals).  All comparisons expect
already-normalized expressions; nothing here depends on the rewrite
engine.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, fields
from typing import Callable, Sequence

import numpy as np

from .vocab import arity, is_const, is_operator, is_variable
from .expr import count_constants, validate

__all__ = [
    "EPS32",
    "SkeletonReport",
    "TooFewValues",
    "skeleton_report",
    "token_f1",
    "zss_distance",
    "total_nestedness",
    "numeric_recovery",
    "bootstrap_ci",
    "report_header",
    "report_row",
]

# float32 machine epsilon: the threshold for a numerically perfect fit
EPS32 = float(np.finfo(np.float32).eps)


# ---------------------------------------------------------------------------
# structural comparison
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SkeletonReport:
    """Per-case structural scores for a (prediction, truth) pair."""

    srr: bool
    token_f1: float
    zss: int
    length_ratio: float
    excess_constants: int
    variable_recall: float
    total_nestedness: int


def token_f1(pred: Sequence[int], truth: Sequence[int]) -> float:
    """Multiset F1 over tokens; the placeholder counts like any token."""
    a, b = Counter(pred), Counter(truth)
    overlap = sum((a & b).values())
    return 2.0 * overlap / (sum(a.values()) + sum(b.values()))


def _postorder(expr: Sequence[int]) -> tuple[list[int], list[int]]:
    """Post-order labels and leftmost-leaf indices of the token tree."""
    labels: list[int] = []
    leftmost: list[int] = []

    def walk(i: int) -> tuple[int, int]:
        first = None
        j = i + 1
        for _ in range(arity(expr[i]) if is_operator(expr[i]) else 0):
            f, j = walk(j)
            if first is None:
                first = f
        idx = len(labels)
        labels.append(expr[i])
        leftmost.append(first if first is not None else idx)
        return leftmost[idx], j

    walk(0)
    return labels, leftmost


def zss_distance(pred: Sequence[int], truth: Sequence[int]) -> int:
    """Tree edit distance with unit relabel/insert/delete costs.

    Classic keyroot dynamic program over post-ordered subforests; exact
    on any pair of expression trees.
    """
    la, ka = _postorder(validate(pred))
    lb, kb = _postorder(validate(truth))
    m, n = len(la), len(lb)
    # keyroots: nodes whose leftmost leaf is not shared with a later node
    roots_a = [i for i in range(m)
               if all(ka[j] != ka[i] for j in range(i + 1, m))]
    roots_b = [i for i in range(n)
               if all(kb[j] != kb[i] for j in range(i + 1, n))]
    dist = np.zeros((m, n), dtype=np.int64)

    for i in roots_a:
        for j in roots_b:
            ioff, joff = ka[i], kb[j]
            fa, fb = i - ioff + 2, j - joff + 2
            fd = np.zeros((fa, fb), dtype=np.int64)
            fd[:, 0] = np.arange(fa)
            fd[0, :] = np.arange(fb)
            for x in range(1, fa):
                for y in range(1, fb):
                    xi, yj = ioff + x - 1, joff + y - 1
                    if ka[xi] == ioff and kb[yj] == joff:
                        fd[x, y] = min(
                            fd[x - 1, y] + 1,
                            fd[x, y - 1] + 1,
                            fd[x - 1, y - 1] + (la[xi] != lb[yj]),
                        )
                        dist[xi, yj] = fd[x, y]
                    else:
                        fd[x, y] = min(
                            fd[x - 1, y] + 1,
                            fd[x, y - 1] + 1,
                            fd[ka[xi] - ioff, kb[yj] - joff]
                            + dist[xi, yj],
                        )
    return int(dist[m - 1, n - 1])


def total_nestedness(expr: Sequence[int]) -> int:
    """Count unary operators whose argument is again a unary operator."""
    expr = validate(expr)
    return sum(
        1 for i in range(len(expr) - 1)
        if is_operator(expr[i]) and arity(expr[i]) == 1
        and is_operator(expr[i + 1]) and arity(expr[i + 1]) == 1
    )


def _variables(expr: Sequence[int]) -> frozenset:
    return frozenset(t for t in expr if is_variable(t))


def skeleton_report(pred: Sequence[int], truth: Sequence[int],
                    ) -> SkeletonReport:
    """Score one prediction against its ground truth.

    Both sides are expected in normalized form already; exact token
    equality is the structural-recovery criterion.
    """
    pred, truth = validate(pred), validate(truth)
    tv = _variables(truth)
    recall = (len(_variables(pred) & tv) / len(tv)) if tv else 1.0
    return SkeletonReport(
        srr=pred == truth,
        token_f1=token_f1(pred, truth),
        zss=zss_distance(pred, truth),
        length_ratio=len(pred) / len(truth),
        excess_constants=count_constants(pred) - count_constants(truth),
        variable_recall=recall,
        total_nestedness=total_nestedness(pred),
    )


# ---------------------------------------------------------------------------
# numeric summaries
# ---------------------------------------------------------------------------

def numeric_recovery(results: Sequence[float], eps: float = EPS32) -> float:
    """Fraction of fits whose fraction of variance unexplained is <= eps."""
    if not len(results):
        raise ValueError("numeric_recovery needs at least one result")
    arr = np.asarray(results, dtype=np.float64)
    return float((arr <= eps).mean())


class TooFewValues(ValueError):
    """bootstrap_ci needs at least two values to resample."""


def bootstrap_ci(values: Sequence[float],
                 statistic: Callable[[np.ndarray], float],
                 resamples: int = 1000, level: float = 0.95,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for a statistic; seeded, exact replay."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        raise TooFewValues("need >= 2 values")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, arr.size, size=(resamples, arr.size))
    stats = np.array([statistic(arr[row]) for row in picks])
    tail = 100.0 * (1.0 - level) / 2.0
    low, high = np.percentile(stats, [tail, 100.0 - tail])
    return float(low), float(high)


# ---------------------------------------------------------------------------
# report rows
# ---------------------------------------------------------------------------

_REPORT_FIELDS = tuple(f.name for f in fields(SkeletonReport))


def report_header() -> str:
    return "case " + " ".join(_REPORT_FIELDS)


def report_row(case_id: str, report: SkeletonReport) -> str:
    """One delimiter-separated row keyed by the test-case id."""
    parts = [case_id]
    for name in _REPORT_FIELDS:
        v = getattr(report, name)
        if isinstance(v, bool):
            parts.append("1" if v else "0")
        elif isinstance(v, float):
            parts.append(repr(v))
        else:
            parts.append(str(v))
    return " ".join(parts)
