"""Numeric evaluation of expressions on data matrices.

Expressions compile to a postfix plan once and evaluate vectorized over
rows; constant vectors may be batched, so one plan evaluates P candidate
constant assignments in a single pass. Extended IEEE semantics throughout:
out-of-domain kernels produce NaN, division by zero produces signed
infinities, and no numeric condition ever raises.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import vocab
from .vocab import CONST, is_const, is_literal, is_operator, is_variable

__all__ = [
    "EvalPlan",
    "ConstantTarget",
    "compile_expr",
    "evaluate",
    "apply_kernel",
    "fvu",
    "fvu_guarded",
    "all_finite_real",
]

# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------
# Indexed by operator id. All are float64 element-wise maps that follow IEEE
# semantics under errstate suppression; odd roots are the signed real roots,
# even roots are NaN on negatives, and pow with a negative base and a
# non-integral exponent is NaN (real semantics, no complex values).


def _pow1_5(x):
    return np.copysign(np.power(np.abs(x), 0.2), x)


_KERNELS = {
    "+": np.add,
    "-": np.subtract,
    "*": np.multiply,
    "/": np.true_divide,
    "abs": np.abs,
    "inv": lambda x: np.true_divide(1.0, x),
    "neg": np.negative,
    "pow": np.power,
    "pow2": np.square,
    "pow3": lambda x: np.power(x, 3.0),
    "pow4": lambda x: np.power(x, 4.0),
    "pow5": lambda x: np.power(x, 5.0),
    "pow1_2": np.sqrt,
    "pow1_3": np.cbrt,
    "pow1_4": lambda x: np.power(x, 0.25),
    "pow1_5": _pow1_5,
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "asin": np.arcsin,
    "acos": np.arccos,
    "atan": np.arctan,
    "sinh": np.sinh,
    "cosh": np.cosh,
    "tanh": np.tanh,
    "asinh": np.arcsinh,
    "acosh": np.arccosh,
    "atanh": np.arctanh,
    "exp": np.exp,
    "log": np.log,
    "mult2": lambda x: 2.0 * x,
    "mult3": lambda x: 3.0 * x,
    "mult4": lambda x: 4.0 * x,
    "mult5": lambda x: 5.0 * x,
    "div2": lambda x: x / 2.0,
    "div3": lambda x: x / 3.0,
    "div4": lambda x: x / 4.0,
    "div5": lambda x: x / 5.0,
}

KERNELS = tuple(_KERNELS[name] for name in vocab.OP_NAMES)


def apply_kernel(op: int, *args):
    """Apply one operator kernel to already-broadcast numpy operands."""
    with np.errstate(all="ignore"):
        return KERNELS[op](*args)


# ---------------------------------------------------------------------------
# compilation
# ---------------------------------------------------------------------------

_LOAD_VAR = 0
_LOAD_CONST = 1
_LOAD_LIT = 2
_APPLY = 3


@dataclass(frozen=True)
class EvalPlan:
    """Postfix instruction sequence for one expression.

    Constant slots are numbered left to right in the source pre-order, so
    slot k corresponds to the k-th placeholder of the original tokens.
    """

    instructions: tuple[tuple[int, int | float], ...]
    n_slots: int
    n_vars_required: int  # highest 1-based variable index used, 0 if none


def compile_expr(expr: Sequence[int]) -> EvalPlan:
    instructions: list[tuple[int, int | float]] = []
    slot_counter = 0
    max_var = 0

    def emit(index: int) -> int:
        nonlocal slot_counter, max_var
        tok = expr[index]
        if is_const(tok):
            instructions.append((_LOAD_CONST, slot_counter))
            slot_counter += 1
            return index + 1
        if is_variable(tok):
            col = vocab.var_index(tok)
            max_var = max(max_var, col)
            instructions.append((_LOAD_VAR, col - 1))
            return index + 1
        if is_literal(tok):
            instructions.append((_LOAD_LIT, vocab.literal_value(tok)))
            return index + 1
        # operator: children first (postfix), slots still follow pre-order
        # because the placeholder count is assigned at the LOAD_CONST above
        # during this pre-order descent.
        pos = index + 1
        for _ in range(vocab.OPERATORS[tok].arity):
            pos = emit(pos)
        instructions.append((_APPLY, tok))
        return pos

    end = emit(0)
    if end != len(expr):
        raise ValueError("trailing tokens after root subtree")
    return EvalPlan(tuple(instructions), slot_counter, max_var)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(plan: EvalPlan, X: np.ndarray | None,
             constants: np.ndarray | Sequence[float] | None = None) -> np.ndarray:
    """Evaluate a plan on an M x D matrix.

    constants may be a flat vector (length n_slots) or a P x n_slots batch;
    the result is (M,) or (P, M) accordingly. Numeric blow-ups never raise.
    """
    if X is None:
        X = np.zeros((1, 0))
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be two-dimensional")
    M = X.shape[0]
    if plan.n_vars_required > X.shape[1]:
        raise ValueError(
            f"plan needs {plan.n_vars_required} columns, X has {X.shape[1]}")

    batched = False
    if plan.n_slots:
        c = np.asarray(constants, dtype=np.float64)
        if c.ndim == 1:
            if c.shape[0] != plan.n_slots:
                raise ValueError(f"expected {plan.n_slots} constants, got {c.shape[0]}")
        elif c.ndim == 2:
            if c.shape[1] != plan.n_slots:
                raise ValueError(f"expected {plan.n_slots} constant columns")
            batched = True
        else:
            raise ValueError("constants must be 1- or 2-dimensional")
    elif constants is not None:
        c = np.asarray(constants, dtype=np.float64)
        if c.ndim == 2:
            batched = True
        if c.size and c.shape[-1] != 0:
            raise ValueError("constant-free plan given constants")

    stack: list = []
    with np.errstate(all="ignore"):
        for kind, arg in plan.instructions:
            if kind == _LOAD_VAR:
                stack.append(X[:, arg])
            elif kind == _LOAD_CONST:
                stack.append(c[:, arg:arg + 1] if batched else c[arg])
            elif kind == _LOAD_LIT:
                stack.append(arg)
            else:
                if vocab.OPERATORS[arg].arity == 2:
                    b = stack.pop()
                    a = stack.pop()
                    stack.append(KERNELS[arg](a, b))
                else:
                    stack.append(KERNELS[arg](stack.pop()))

    result = stack.pop()
    shape = (c.shape[0], M) if batched else (M,)
    out = np.empty(shape, dtype=np.float64)
    out[...] = result
    return out


# ---------------------------------------------------------------------------
# goodness of fit
# ---------------------------------------------------------------------------

class ConstantTarget(ValueError):
    """The target vector has zero variance; FVU is undefined."""


def fvu(y: np.ndarray, y_hat: np.ndarray) -> float:
    """Fraction of variance unexplained. Any NaN prediction counts as a
    failed fit (+inf); a constant target raises ConstantTarget."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError("shape mismatch between targets and predictions")
    denom = float(np.sum((y - y.mean()) ** 2))
    if denom == 0.0:
        raise ConstantTarget("target vector is constant")
    if np.isnan(y_hat).any():
        return float("inf")
    with np.errstate(all="ignore"):
        num = float(np.sum((y - y_hat) ** 2))
    if np.isnan(num):
        return float("inf")
    return num / denom


def fvu_guarded(y: np.ndarray, y_hat: np.ndarray) -> float:
    """Never-raising variant used inside fitting loops: perfect fits on
    degenerate targets report 0, anything undefined reports +inf."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if np.isnan(y_hat).any():
        return float("inf")
    with np.errstate(all="ignore"):
        num = float(np.sum((y - y_hat) ** 2))
        denom = float(np.sum((y - y.mean()) ** 2))
    if np.isnan(num):
        return float("inf")
    if denom == 0.0 or not np.isfinite(denom):
        return 0.0 if num == 0.0 else float("inf")
    return num / denom


def all_finite_real(v: np.ndarray) -> bool:
    return bool(np.isfinite(np.asarray(v)).all())
