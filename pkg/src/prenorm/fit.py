"""Constant fitting and numeric equivalence testing.

Expressions carry opaque constant slots; deciding whether two skeletons
denote the same function therefore reduces to a fitting problem: for
each assignment of the source's constants, can the candidate's constants
be chosen so the two agree on a fixed probe sample?  This module supplies
the damped least-squares optimizer used for that inner fit, the
tolerance predicate that treats non-finite values structurally, the
challenge/sign-pattern protocol built on top, and the parsimony score
used to pick among fitted candidates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .evaluate import EvalPlan, compile_expr, evaluate, fvu_guarded
from .expr import PrefixExpr, canonical_key, count_constants, variable_set

# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

#: Residual clamp for rows where the model evaluates to a non-finite value.
RESIDUAL_CLAMP = 1.0e8

#: Initial damping factor for the damped least-squares iteration.
LM_DAMPING_INIT = 1.0e-3
LM_DAMPING_GROW = 2.0
LM_DAMPING_SHRINK = 1.0 / 3.0

#: Relative step used by the central-difference Jacobian.
LM_FD_STEP = 1.0e-6

#: Convergence thresholds: step size relative to parameter scale, and
#: relative objective improvement per accepted step.
LM_STEP_TOL = 1.0e-10
LM_OBJ_TOL = 1.0e-12


@dataclass(frozen=True)
class FitResult:
    """Outcome of fitting an expression's constants to data."""

    constants: tuple[float, ...]
    fvu: float
    converged: bool
    iterations: int


@dataclass(frozen=True)
class EquivalenceConfig:
    """Knobs for the numeric-equivalence decision procedure."""

    challenges: int = 16        # constant draws tried on the source
    retries: int = 16           # fit restarts allowed per target image
    sigma: float = 5.0          # scale of probe inputs and constant draws
    rows: int = 1024            # probe sample size
    atol: float = 1.0e-6
    rtol: float = 1.0e-4
    max_sign_patterns: int = 81  # cap on the sign grid over source constants
    batch: int = 128             # targets fitted per vectorized LM call
    fit_rows: int = 256          # probe rows used inside the fit objective;
                                 # acceptance always checks all rows
    probes: np.ndarray | None = field(default=None, compare=False)


# ---------------------------------------------------------------------------
# tolerance predicate
# ---------------------------------------------------------------------------

def allclose_extended(
    a: np.ndarray,
    b: np.ndarray,
    atol: float = 1.0e-6,
    rtol: float = 1.0e-4,
) -> bool:
    """Elementwise closeness that treats non-finite values structurally.

    A pair passes when both entries are NaN, both are the same infinity,
    or both are finite with |a - b| <= atol + rtol * |b|.  Exactly one
    non-finite entry fails the pair.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    fin_a = np.isfinite(a)
    fin_b = np.isfinite(b)
    both_nan = np.isnan(a) & np.isnan(b)
    both_inf = ~fin_a & ~fin_b & (a == b)
    with np.errstate(invalid="ignore", over="ignore"):
        close = fin_a & fin_b & (np.abs(a - b) <= atol + rtol * np.abs(b))
    return bool(np.all(close | both_nan | both_inf))


def extended_close_mask(
    a: np.ndarray,
    b: np.ndarray,
    atol: float,
    rtol: float,
) -> np.ndarray:
    """Per-element version of :func:`allclose_extended` (broadcasts)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    fin_a = np.isfinite(a)
    fin_b = np.isfinite(b)
    both_nan = np.isnan(a) & np.isnan(b)
    both_inf = ~fin_a & ~fin_b & (a == b)
    with np.errstate(invalid="ignore", over="ignore"):
        close = fin_a & fin_b & (np.abs(a - b) <= atol + rtol * np.abs(b))
    return close | both_nan | both_inf


# ---------------------------------------------------------------------------
# damped least squares (single problem)
# ---------------------------------------------------------------------------

def _clamped_residual(plan: EvalPlan, X: np.ndarray, c: np.ndarray, y: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        r = evaluate(plan, X, c) - y
    return np.nan_to_num(r, nan=RESIDUAL_CLAMP, posinf=RESIDUAL_CLAMP, neginf=-RESIDUAL_CLAMP)


def levmar(
    plan: EvalPlan,
    X: np.ndarray,
    y: np.ndarray,
    c0: Sequence[float],
    budget: int = 100,
) -> FitResult:
    """Damped least-squares fit of the plan's constant slots to targets y.

    Rows where the model is non-finite contribute a clamped residual, so
    the objective is always finite.  The damping factor starts at 1e-3,
    doubles on a rejected step, and shrinks by a third on acceptance.
    The objective over accepted steps is non-increasing by construction.
    """
    y = np.asarray(y, dtype=np.float64)
    c = np.asarray(c0, dtype=np.float64).copy()
    n = c.size
    if n == 0:
        yhat = evaluate(plan, X, c)
        return FitResult((), fvu_guarded(y, yhat), True, 0)

    r = _clamped_residual(plan, X, c, y)
    sse = float(r @ r)
    lam = LM_DAMPING_INIT
    converged = False
    iters = 0

    for iters in range(1, budget + 1):
        # Central-difference Jacobian, one column per constant slot.
        J = np.empty((y.size, n))
        for j in range(n):
            h = LM_FD_STEP * max(1.0, abs(c[j]))
            cp = c.copy()
            cp[j] += h
            cm = c.copy()
            cm[j] -= h
            J[:, j] = (_clamped_residual(plan, X, cp, y) - _clamped_residual(plan, X, cm, y)) / (2.0 * h)

        g = J.T @ r
        if float(np.max(np.abs(g))) <= LM_STEP_TOL:
            converged = True
            break
        A = J.T @ J
        d = np.maximum(np.diag(A), 1.0e-12)

        stepped = False
        while lam < 1.0e12:
            try:
                delta = np.linalg.solve(A + lam * np.diag(d), -g)
            except np.linalg.LinAlgError:
                lam *= LM_DAMPING_GROW
                continue
            c_new = c + delta
            r_new = _clamped_residual(plan, X, c_new, y)
            sse_new = float(r_new @ r_new)
            if sse_new < sse:
                rel_gain = (sse - sse_new) / max(sse, 1.0e-300)
                step_ok = float(np.max(np.abs(delta))) <= LM_STEP_TOL * (1.0 + float(np.max(np.abs(c))))
                c, r, sse = c_new, r_new, sse_new
                lam = max(lam * LM_DAMPING_SHRINK, 1.0e-12)
                stepped = True
                if step_ok or rel_gain <= LM_OBJ_TOL:
                    converged = True
                break
            lam *= LM_DAMPING_GROW
        if not stepped:
            converged = True  # no descent direction available at any damping
            break
        if converged:
            break

    yhat = evaluate(plan, X, c)
    return FitResult(tuple(float(v) for v in c), fvu_guarded(y, yhat), converged, iters)


# ---------------------------------------------------------------------------
# damped least squares (batched over independent problems)
# ---------------------------------------------------------------------------

def levmar_multi(
    plan: EvalPlan,
    X: np.ndarray,
    Y: np.ndarray,
    C0: np.ndarray,
    budget: int = 100,
    row_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Fit P independent problems sharing one plan and probe matrix.

    Y is (P, M) targets, C0 is (P, S) initial constants, row_mask is an
    optional (P, M) boolean selecting the rows that participate in each
    problem's objective.  Returns (C, active_improved) where C is (P, S)
    fitted constants.  Semantics per problem match :func:`levmar`.
    """
    Y = np.asarray(Y, dtype=np.float64)
    C = np.asarray(C0, dtype=np.float64).copy()
    P, S = C.shape
    if S == 0:
        return C, np.zeros(P, dtype=bool)
    M = Y.shape[1]
    if row_mask is None:
        row_mask = np.ones((P, M), dtype=bool)

    def residual(Cc: np.ndarray, Yv: np.ndarray, maskv: np.ndarray) -> np.ndarray:
        with np.errstate(all="ignore"):
            R = evaluate(plan, X, Cc) - Yv
        R = np.nan_to_num(R, nan=RESIDUAL_CLAMP, posinf=RESIDUAL_CLAMP, neginf=-RESIDUAL_CLAMP)
        R[~maskv] = 0.0
        return R

    # The driver shrinks its working set to the still-active problems once
    # most have converged; each problem's arithmetic is unaffected by its
    # batch neighbours, so compaction changes no per-problem result.
    C_out = C.copy()
    act_out = np.zeros(P, dtype=bool)
    orig = np.arange(P)

    R = residual(C, Y, row_mask)
    sse = np.einsum("pm,pm->p", R, R)
    lam = np.full(P, LM_DAMPING_INIT)
    active = np.ones(P, dtype=bool)

    for _ in range(budget):
        if not active.any():
            break
        n_live = int(active.sum())
        if n_live * 2 < orig.size and orig.size > 8:
            keep = np.flatnonzero(active)
            C_out[orig] = C
            act_out[orig] = active
            orig = orig[keep]
            C, Y, row_mask = C[keep], Y[keep], row_mask[keep]
            R, sse, lam = R[keep], sse[keep], lam[keep]
            active = active[keep]
        n = C.shape[0]

        # Jacobian w.r.t. each constant slot, batched across problems.
        J = np.empty((n, Y.shape[1], S))
        H = LM_FD_STEP * np.maximum(1.0, np.abs(C))
        with np.errstate(all="ignore"):
            for j in range(S):
                Cp = C.copy()
                Cp[:, j] += H[:, j]
                Cm = C.copy()
                Cm[:, j] -= H[:, j]
                J[:, :, j] = (residual(Cp, Y, row_mask) - residual(Cm, Y, row_mask)) / (2.0 * H[:, j])[:, None]

        G = np.einsum("pms,pm->ps", J, R)
        grad_small = np.max(np.abs(G), axis=1) <= LM_STEP_TOL
        active &= ~grad_small
        if not active.any():
            break

        A = np.einsum("pms,pmt->pst", J, J)
        D = np.maximum(np.einsum("pss->ps", A), 1.0e-12)

        # Inner damping loop, vectorized: problems that reject a step stay
        # pending with doubled damping until they accept or damping blows up.
        pending = active.copy()
        for _ in range(64):
            if not pending.any():
                break
            Ad = A + lam[:, None, None] * (D[:, :, None] * np.eye(S)[None, :, :])
            idx = np.flatnonzero(pending)
            try:
                delta = np.linalg.solve(Ad[idx], -G[idx][:, :, None])[:, :, 0]
            except np.linalg.LinAlgError:
                delta = np.linalg.solve(
                    Ad[idx] + 1.0e-9 * np.eye(S)[None, :, :], -G[idx][:, :, None]
                )[:, :, 0]
            C_try = C.copy()
            C_try[idx] += delta
            R_try = residual(C_try, Y, row_mask)
            sse_try = np.einsum("pm,pm->p", R_try, R_try)

            improved = np.zeros(n, dtype=bool)
            improved[idx] = sse_try[idx] < sse[idx]
            if improved.any():
                rel_gain = np.zeros(n)
                with np.errstate(all="ignore"):
                    rel_gain[improved] = (sse[improved] - sse_try[improved]) / np.maximum(sse[improved], 1.0e-300)
                step_sz = np.zeros(n)
                scale = 1.0 + np.max(np.abs(C), axis=1)
                step_full = np.zeros((n, S))
                step_full[idx] = delta
                step_sz[improved] = np.max(np.abs(step_full[improved]), axis=1)
                C[improved] = C_try[improved]
                R[improved] = R_try[improved]
                sse[improved] = sse_try[improved]
                lam[improved] = np.maximum(lam[improved] * LM_DAMPING_SHRINK, 1.0e-12)
                done = improved & (
                    (step_sz <= LM_STEP_TOL * scale) | (rel_gain <= LM_OBJ_TOL)
                )
                active &= ~done
            rejected = pending & ~improved
            lam[rejected] *= LM_DAMPING_GROW
            exhausted = rejected & (lam >= 1.0e12)
            active &= ~exhausted
            pending = rejected & ~exhausted

    C_out[orig] = C
    act_out[orig] = active
    return C_out, act_out


# ---------------------------------------------------------------------------
# public fitting entry point
# ---------------------------------------------------------------------------

def fit_constants(
    expr: PrefixExpr,
    X: np.ndarray,
    y: np.ndarray,
    restarts: int = 8,
    seed: int | np.random.Generator | None = 0,
    budget: int = 100,
) -> FitResult:
    """Fit an expression's constant slots to data with random restarts.

    Initial values are drawn from N(0, 5) per restart; the best result by
    fraction of variance unexplained is returned.  Constant-free
    expressions are evaluated directly with zero restarts.
    """
    plan = compile_expr(expr)
    y = np.asarray(y, dtype=np.float64)
    if plan.n_slots == 0:
        yhat = evaluate(plan, X, ())
        return FitResult((), fvu_guarded(y, yhat), True, 0)

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    best: FitResult | None = None
    for _ in range(max(1, restarts)):
        c0 = rng.normal(0.0, 5.0, plan.n_slots)
        res = levmar(plan, X, y, c0, budget=budget)
        if best is None or res.fvu < best.fvu or (res.fvu == best.fvu and res.converged and not best.converged):
            best = res
    assert best is not None
    return best


# ---------------------------------------------------------------------------
# numeric equivalence
# ---------------------------------------------------------------------------

def _sign_patterns(n_constants: int, cap: int, rng: np.random.Generator) -> np.ndarray:
    """Grid of sign assignments in {-1, 0, +1}^n, capped by sampling."""
    if n_constants == 0:
        return np.zeros((1, 0))
    total = 3 ** n_constants
    if total <= cap:
        grid = np.stack(
            np.meshgrid(*([np.array([-1.0, 0.0, 1.0])] * n_constants), indexing="ij"),
            axis=-1,
        ).reshape(total, n_constants)
        return grid
    seen: set[bytes] = set()
    rows: list[np.ndarray] = []
    while len(rows) < cap:
        s = rng.integers(-1, 2, n_constants).astype(np.float64)
        key = s.tobytes()
        if key not in seen:
            seen.add(key)
            rows.append(s)
    return np.stack(rows)


def equivalent(
    source: PrefixExpr,
    candidate: PrefixExpr,
    config: EquivalenceConfig | None = None,
    seed: int | np.random.Generator | None = 0,
) -> bool:
    """Decide whether candidate denotes the same function as source.

    The source's constants are assigned values over several challenge
    draws crossed with a sign grid; for each resulting target image the
    candidate's constants are fitted and the images compared under the
    extended closeness predicate.  Target images that are NaN on every
    probe row are skipped as uninformative.  A candidate referencing a
    variable absent from the source is rejected outright.
    """
    cfg = config or EquivalenceConfig()
    if tuple(source) == tuple(candidate):
        return True
    if not variable_set(candidate) <= variable_set(source):
        return False

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    src_plan = compile_expr(source)
    cand_plan = compile_expr(candidate)

    if cfg.probes is not None:
        X = np.asarray(cfg.probes, dtype=np.float64)
    else:
        dims = max(1, src_plan.n_vars_required)
        X = rng.normal(0.0, cfg.sigma, (cfg.rows, dims))

    S_src = src_plan.n_slots
    patterns = _sign_patterns(S_src, cfg.max_sign_patterns, rng)
    n_challenges = cfg.challenges if S_src > 0 else 1

    # All source images for every challenge x sign pattern, in one shot.
    blocks = []
    for _ in range(n_challenges):
        r = np.abs(rng.normal(0.0, cfg.sigma, S_src))
        blocks.append(patterns * r)
    C_src = np.concatenate(blocks, axis=0) if S_src > 0 else np.zeros((1, 0))
    Y = evaluate(src_plan, X, C_src)
    if Y.ndim == 1:
        Y = Y[None, :]

    # Skip uniformly-NaN targets; deduplicate bit-identical images.
    keep = ~np.all(np.isnan(Y), axis=1)
    if not keep.any():
        # Uniformly-NaN source: exact extended-value comparison instead
        # of the skip, so only an everywhere-NaN candidate may match.
        Y = Y[:1]
    else:
        Y = Y[keep]
    seen: set[bytes] = set()
    rows = []
    for i in range(Y.shape[0]):
        key = Y[i].tobytes()
        if key not in seen:
            seen.add(key)
            rows.append(i)
    Y = Y[rows]
    n_targets = Y.shape[0]

    S_cand = cand_plan.n_slots
    if S_cand == 0:
        y_cand = evaluate(cand_plan, X, ())
        mask = extended_close_mask(y_cand[None, :], Y, cfg.atol, cfg.rtol)
        return bool(np.all(mask))

    # Fit candidate constants per target.  Rows where the target is
    # non-finite are excluded from the objective (the clamp would swamp
    # it) and checked afterwards by the extended predicate.
    fit_mask = np.isfinite(Y)
    resolved = np.zeros(n_targets, dtype=bool)
    solutions = np.zeros((n_targets, S_cand))
    warm: np.ndarray | None = None

    for attempt in range(cfg.retries):
        todo = np.flatnonzero(~resolved)
        if todo.size == 0:
            break
        if attempt == 0 and warm is None:
            C0_all = np.zeros((todo.size, S_cand))
        else:
            C0_all = rng.normal(0.0, cfg.sigma, (todo.size, S_cand))
        for lo in range(0, todo.size, cfg.batch):
            sel = todo[lo:lo + cfg.batch]
            C_fit, _ = levmar_multi(
                cand_plan, X, Y[sel], C0_all[lo:lo + cfg.batch],
                row_mask=fit_mask[sel],
            )
            Y_hat = evaluate(cand_plan, X, C_fit)
            ok = np.array([
                allclose_extended(Y_hat[i], Y[sel[i]], cfg.atol, cfg.rtol)
                for i in range(sel.size)
            ])
            resolved[sel[ok]] = True
            solutions[sel[ok]] = C_fit[ok]
        done = np.flatnonzero(resolved)
        if done.size > 0:
            warm = solutions[done[-1]]
            todo2 = np.flatnonzero(~resolved)
            if todo2.size > 0 and attempt == 0:
                # Retry unresolved targets once from the warm start before
                # falling back to random restarts.
                for lo in range(0, todo2.size, cfg.batch):
                    sel = todo2[lo:lo + cfg.batch]
                    C0w = np.tile(warm, (sel.size, 1))
                    C_fit, _ = levmar_multi(
                        cand_plan, X, Y[sel], C0w, row_mask=fit_mask[sel],
                    )
                    Y_hat = evaluate(cand_plan, X, C_fit)
                    ok = np.array([
                        allclose_extended(Y_hat[i], Y[sel[i]], cfg.atol, cfg.rtol)
                        for i in range(sel.size)
                    ])
                    resolved[sel[ok]] = True
                    solutions[sel[ok]] = C_fit[ok]

    return bool(np.all(resolved))


# ---------------------------------------------------------------------------
# model selection
# ---------------------------------------------------------------------------

#: Floor applied to fvu inside the parsimony score so exact fits rank usefully.
PARSIMONY_FLOOR = 1.0e-30


class EmptyCandidates(ValueError):
    """select_best was called with no candidates."""


def parsimony_score(fvu: float, length: int, gamma: float = 0.05) -> float:
    """Accuracy/complexity trade-off: log10(max(fvu, floor)) + gamma * length."""
    return math.log10(max(fvu, PARSIMONY_FLOOR)) + gamma * length


def select_best(
    candidates: Sequence[tuple[PrefixExpr, FitResult]],
    gamma: float = 0.05,
) -> tuple[PrefixExpr, FitResult]:
    """Pick the candidate with the lowest parsimony score.

    Ties break toward the shorter expression, then the one earlier in
    the canonical token order.
    """
    if not candidates:
        raise EmptyCandidates("no candidates to select from")

    def key(item: tuple[PrefixExpr, FitResult]):
        expr, res = item
        return (parsimony_score(res.fvu, len(expr), gamma), len(expr), canonical_key(expr))

    return min(candidates, key=key)
