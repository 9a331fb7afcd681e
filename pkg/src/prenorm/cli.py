"""Command-line surface for the normalization pipeline.

Five subcommands cover the batch workflow: ``discover`` scans for
rewrite rules and writes a rules file, ``simplify`` normalizes a
stream of expressions line by line, ``generate`` emits a synthetic
training dataset, ``bench`` measures engine latency on sampled
expressions, and ``score`` runs the recovery-metrics battery.

Every run prints one JSON manifest as the last line of the
diagnostics stream (stderr).  Two runs whose manifests agree on
everything except the stage timings produce byte-identical primary
outputs, measured wall-clock columns aside.  Exit codes: 0 success,
1 finished with per-line errors, 2 fatal configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import multiprocessing
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence, TextIO

import numpy as np

from . import __version__
from .datagen import (
    GenConfig,
    Rejection,
    TrainingInstance,
    build_holdout_index,
    instance_seed,
    read_holdout,
    sample_instance,
    sample_skeleton,
    write_dataset,
)
from .expr import ExpressionError, format_prefix, parse_prefix
from .fit import fit_constants, select_best
from .metrics import (
    EPS32,
    TooFewValues,
    bootstrap_ci,
    report_header,
    report_row,
    skeleton_report,
)
from .rules import RulesFileError, discover_rules, load_rules, save_rules
from .simplify import RuleIndex, build_index, simplify
from .vocab import LITERAL_NAMES, OPERATORS, Alphabet, full_alphabet


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    """Reproducibility record emitted once per run.

    The determinism key covers command, config echo, seed, and the
    engine/rules versions; stage timings are measurements and stay
    outside it.  Runs with equal keys write byte-identical primary
    outputs apart from measured wall-clock columns.
    """

    command: str
    config: dict
    seed: int
    versions: dict
    timings: dict = field(default_factory=dict)

    def determinism_key(self) -> str:
        return json.dumps(
            {"command": self.command, "config": self.config,
             "seed": self.seed, "versions": self.versions},
            sort_keys=True)

    def to_json(self) -> str:
        return json.dumps(
            {"command": self.command, "config": self.config,
             "seed": self.seed, "versions": self.versions,
             "timings": self.timings},
            sort_keys=True)


class _Stages:
    """Wall-clock accumulator; one entry per named stage."""

    def __init__(self) -> None:
        self.timings: dict[str, float] = {}

    def run(self, name: str, thunk: Callable):
        t0 = time.perf_counter()
        out = thunk()
        self.timings[name] = round(time.perf_counter() - t0, 6)
        return out


def _config_echo(ns: argparse.Namespace) -> dict:
    skip = {"command", "config"}
    return {k: v for k, v in sorted(vars(ns).items()) if k not in skip}


def _emit_manifest(manifest: RunManifest) -> None:
    print(manifest.to_json(), file=sys.stderr)


def _file_fingerprint(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

class CliError(Exception):
    """Fatal configuration problem; maps to exit code 2."""


def _require(ns: argparse.Namespace, *names: str) -> None:
    """Post-merge check so a config file may supply required options."""
    missing = [n for n in names if getattr(ns, n) is None]
    if missing:
        raise CliError("missing required option(s): "
                       + ", ".join(f"--{n}" for n in missing))


def _open_out(path: str | None) -> tuple[TextIO, bool]:
    if path is None:
        return sys.stdout, False
    return open(path, "w", encoding="utf-8", newline="\n"), True


def _load_engine(ns: argparse.Namespace) -> tuple[RuleIndex, str | None]:
    """Build the rule index named by --rules, capped at --lmax."""
    if ns.rules is None:
        return build_index(()), None
    rule_set = load_rules(ns.rules)
    rules = rule_set.rules
    if ns.lmax is not None:
        rules = tuple(r for r in rules if len(r.pattern) <= ns.lmax)
    return build_index(rules), _file_fingerprint(ns.rules)


def _resolve_alphabet(ns: argparse.Namespace) -> Alphabet:
    if ns.ops is None and ns.lits is None:
        return full_alphabet(ns.dims)
    ops = ([s for s in (p.strip() for p in ns.ops.split(",")) if s]
           if ns.ops is not None else [info.name for info in OPERATORS])
    lits = ([s for s in (p.strip() for p in ns.lits.split(",")) if s]
            if ns.lits is not None else list(LITERAL_NAMES))
    return Alphabet.from_names(ops, ns.dims, lits)


# Workers read their task context from module state set before the pool
# forks; payloads over the pipe stay small that way.
_WORK: dict = {}


def _pool_map(fn: Callable, items: Iterable, workers: int,
              block: int) -> Iterator:
    """Order-preserving map over a forked worker pool; inline when 1.

    Items are pulled in bounded blocks so an unbounded input stream
    never floods the task queue.
    """
    if workers <= 1:
        yield from map(fn, items)
        return
    ctx = multiprocessing.get_context("fork")
    pool = ctx.Pool(workers)
    try:
        stream = iter(items)
        while True:
            batch = list(itertools.islice(stream, block))
            if not batch:
                return
            yield from pool.map(fn, batch)
    finally:
        pool.terminate()
        pool.join()


# ---------------------------------------------------------------------------
# discover
# ---------------------------------------------------------------------------

def cmd_discover(ns: argparse.Namespace) -> int:
    alphabet = _resolve_alphabet(ns)
    stages = _Stages()

    def on_level(level: int, pool: int, new_rules: int) -> None:
        print(f"level {level}: scanned {pool} expressions, "
              f"{new_rules} new rules", file=sys.stderr)

    rule_set = stages.run("discover", lambda: discover_rules(
        alphabet, l_max=ns.lmax, l_tgt=ns.ltgt, seed=ns.seed,
        on_level=on_level))
    out, owned = _open_out(ns.out)
    try:
        stages.run("save", lambda: save_rules(rule_set, out))
    finally:
        if owned:
            out.close()
    versions = {"engine": __version__,
                "rules": _file_fingerprint(ns.out) if ns.out else None}
    _emit_manifest(RunManifest("discover", _config_echo(ns), ns.seed,
                               versions, stages.timings))
    return 0


# ---------------------------------------------------------------------------
# simplify
# ---------------------------------------------------------------------------

def _simplify_line(item: tuple[int, str]):
    line_no, text = item
    try:
        tokens = parse_prefix(text)
    except ExpressionError as exc:
        return line_no, None, str(exc)
    t0 = time.perf_counter()
    result = simplify(tokens, _WORK["index"], _WORK["budget"])
    dt = time.perf_counter() - t0
    return line_no, (format_prefix(result), len(tokens), len(result), dt), None


def cmd_simplify(ns: argparse.Namespace) -> int:
    stages = _Stages()
    index, rules_fp = stages.run("load_rules", lambda: _load_engine(ns))
    _WORK.update(index=index, budget=ns.budget)

    items = ((n, line.strip()) for n, line in enumerate(sys.stdin, 1)
             if line.strip())
    out, owned = _open_out(ns.out)
    errors = 0
    t0 = time.perf_counter()
    try:
        for line_no, ok, err in _pool_map(_simplify_line, items,
                                          ns.workers, 1024):
            if err is not None:
                errors += 1
                print(f"line {line_no}: {err}", file=sys.stderr)
                continue
            text, len_in, len_out, dt = ok
            if ns.stats:
                out.write(f"{text}\t{dt!r} {len_out / len_in!r}\n")
            else:
                out.write(text + "\n")
    finally:
        if owned:
            out.close()
    stages.timings["simplify"] = round(time.perf_counter() - t0, 6)

    versions = {"engine": __version__, "rules": rules_fp}
    _emit_manifest(RunManifest("simplify", _config_echo(ns), ns.seed,
                               versions, stages.timings))
    return 1 if errors else 0


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def _gen_one(counter: int):
    rng = np.random.default_rng(instance_seed(_WORK["cfg"].seed, counter))
    return sample_instance(rng, _WORK["cfg"], _WORK["holdout"], _WORK["index"])


def cmd_generate(ns: argparse.Namespace) -> int:
    _require(ns, "dims", "count")
    stages = _Stages()
    index, rules_fp = stages.run("load_rules", lambda: _load_engine(ns))
    cfg = GenConfig(dims=ns.dims, seed=ns.seed,
                    l_max=ns.lmax if ns.lmax is not None else 4)

    def load_holdout():
        if ns.holdout is None:
            return build_holdout_index((), cfg.dims, cfg.seed)
        with open(ns.holdout, "r", encoding="utf-8") as fh:
            return build_holdout_index(read_holdout(fh), cfg.dims, cfg.seed)

    holdout = stages.run("holdout", load_holdout)
    _WORK.update(cfg=cfg, holdout=holdout, index=index)

    tally: dict[str, int] = {}
    attempts = 0
    # one attempt per counter, forever; acceptance caps the scan
    outcomes = _pool_map(_gen_one, itertools.count(), ns.workers, 64)

    def accepted() -> Iterator[TrainingInstance]:
        nonlocal attempts
        taken = 0
        while taken < ns.count:
            outcome = next(outcomes)
            attempts += 1
            if isinstance(outcome, Rejection):
                kind = outcome.kind()
                tally[kind] = tally.get(kind, 0) + 1
                continue
            taken += 1
            yield outcome

    out, owned = _open_out(ns.out)
    try:
        written = stages.run("generate",
                             lambda: write_dataset(out, cfg, accepted()))
    finally:
        outcomes.close()
        if owned:
            out.close()

    parts = "".join(f" {k}={v}" for k, v in sorted(tally.items()))
    print(f"accepted {written} of {attempts} attempts{parts}",
          file=sys.stderr)
    versions = {"engine": __version__, "rules": rules_fp}
    _emit_manifest(RunManifest("generate", _config_echo(ns), ns.seed,
                               versions, stages.timings))
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def _bench_one(i: int):
    rng = np.random.default_rng(instance_seed(_WORK["cfg"].seed, i))
    skeleton = sample_skeleton(rng, _WORK["cfg"])
    t0 = time.perf_counter()
    result = simplify(skeleton, _WORK["index"], _WORK["budget"])
    dt = time.perf_counter() - t0
    return len(skeleton), len(result), dt


def _quantile_line(label: str, values: np.ndarray, scale: float) -> str:
    p50, p90, p99 = np.percentile(values * scale, [50.0, 90.0, 99.0])
    return (f"# {label} p50 {p50:.6g} p90 {p90:.6g} p99 {p99:.6g}")


def cmd_bench(ns: argparse.Namespace) -> int:
    _require(ns, "rules")
    stages = _Stages()
    index, rules_fp = stages.run("load_rules", lambda: _load_engine(ns))
    cfg = GenConfig(dims=ns.dims, seed=ns.seed)
    _WORK.update(cfg=cfg, index=index, budget=ns.budget)

    lens = np.zeros(ns.count)
    ratios = np.zeros(ns.count)
    times = np.zeros(ns.count)
    out, owned = _open_out(ns.out)
    t0 = time.perf_counter()
    try:
        rows = _pool_map(_bench_one, range(ns.count), ns.workers, 512)
        for i, (len_in, len_out, dt) in enumerate(rows):
            ratio = len_out / len_in
            lens[i], ratios[i], times[i] = len_in, ratio, dt
            out.write(f"{i} {len_in} {len_out} {ratio!r} {dt!r}\n")
        stages.timings["bench"] = round(time.perf_counter() - t0, 6)
        if ns.count:
            out.write(f"# expressions {ns.count} mean_len {lens.mean():.6g}\n")
            out.write(_quantile_line("time_ms", times, 1e3) + "\n")
            out.write(_quantile_line("ratio", ratios, 1.0) + "\n")
    finally:
        if owned:
            out.close()

    versions = {"engine": __version__, "rules": rules_fp}
    _emit_manifest(RunManifest("bench", _config_echo(ns), ns.seed,
                               versions, stages.timings))
    return 0


# ---------------------------------------------------------------------------
# score
# ---------------------------------------------------------------------------

def _read_lines(path: str) -> list[str]:
    with open(path, "r", encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def _load_case(data_dir: str, case: int) -> tuple[np.ndarray, np.ndarray]:
    path = os.path.join(data_dir, f"{case}.txt")
    rows = np.loadtxt(path, ndmin=2)
    return rows[:, :-1], rows[:, -1]


def _rate_line(label: str, values: list[float], seed: int) -> str:
    mean = float(np.mean(values))
    try:
        lo, hi = bootstrap_ci(values, np.mean, seed=seed)
    except TooFewValues:
        return f"# {label} {mean!r}"
    return f"# {label} {mean!r} ci {lo!r} {hi!r}"


def cmd_score(ns: argparse.Namespace) -> int:
    pred_lines = _read_lines(ns.pred)
    truth_lines = _read_lines(ns.truth)
    if len(pred_lines) != len(truth_lines):
        raise CliError(f"pred has {len(pred_lines)} lines, "
                       f"truth has {len(truth_lines)}")

    stages = _Stages()
    out, owned = _open_out(ns.out)
    errors = 0
    srr, f1s, fvus = [], [], []
    t0 = time.perf_counter()
    try:
        out.write(report_header() + "\n")
        for i, (pline, tline) in enumerate(zip(pred_lines, truth_lines)):
            try:
                truth = parse_prefix(tline)
                # a line may carry several ';'-separated candidates
                cands = [parse_prefix(p) for p in pline.split(";")]
                if ns.data is not None:
                    x, y = _load_case(ns.data, i)
                    rng = np.random.default_rng(instance_seed(ns.seed, i))
                    fits = [(c, fit_constants(c, x, y, restarts=ns.restarts,
                                              seed=rng)) for c in cands]
                    best, best_fit = select_best(fits, gamma=ns.gamma)
                    fvus.append(best_fit.fvu)
                else:
                    best = cands[0]
            except (ValueError, OSError) as exc:
                # covers parse errors, bad data files, and fit rejects
                errors += 1
                print(f"case {i}: {exc}", file=sys.stderr)
                continue
            report = skeleton_report(best, truth)
            srr.append(1.0 if report.srr else 0.0)
            f1s.append(report.token_f1)
            out.write(report_row(str(i), report) + "\n")

        if srr:
            out.write(_rate_line("srr", srr, ns.seed) + "\n")
            out.write(_rate_line("token_f1", f1s, ns.seed) + "\n")
        if fvus:
            # the rate equals numeric_recovery; per-case hits feed the CI
            hits = [1.0 if v <= EPS32 else 0.0 for v in fvus]
            out.write(_rate_line("nrr", hits, ns.seed) + "\n")
    finally:
        if owned:
            out.close()
    stages.timings["score"] = round(time.perf_counter() - t0, 6)

    versions = {"engine": __version__, "rules": None}
    _emit_manifest(RunManifest("score", _config_echo(ns), ns.seed,
                               versions, stages.timings))
    return 1 if errors else 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

_COMMANDS: dict[str, Callable[[argparse.Namespace], int]] = {
    "discover": cmd_discover,
    "simplify": cmd_simplify,
    "generate": cmd_generate,
    "bench": cmd_bench,
    "score": cmd_score,
}


def _add_common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--seed", type=int, default=0,
                    help="run seed (default 0)")
    sp.add_argument("--workers", type=int,
                    default=os.cpu_count() or 1,
                    help="worker processes; output order is unaffected")
    sp.add_argument("--out", default=None,
                    help="output path (default stdout)")
    sp.add_argument("--config", default=None,
                    help="JSON file of flag defaults; explicit flags win")


def build_parser() -> tuple[argparse.ArgumentParser,
                            dict[str, argparse.ArgumentParser]]:
    top = argparse.ArgumentParser(
        prog="prenorm",
        description="Rule-driven normalization of prefix-token math "
                    "expressions.")
    top.add_argument("--version", action="version",
                     version=f"prenorm {__version__}")
    sub = top.add_subparsers(dest="command", required=True, metavar="command")
    parsers: dict[str, argparse.ArgumentParser] = {}

    d = sub.add_parser("discover",
                       help="scan for rewrite rules and write a rules file")
    d.add_argument("--dims", type=int, default=4,
                   help="number of variables in the alphabet (default 4)")
    d.add_argument("--ops", default=None,
                   help="comma-separated operator names (default all)")
    d.add_argument("--lits", default=None,
                   help="comma-separated literal names (default all)")
    d.add_argument("--lmax", type=int, default=4,
                   help="largest pattern length scanned (default 4)")
    d.add_argument("--ltgt", type=int, default=3,
                   help="largest replacement length (default 3)")
    _add_common(d)
    parsers["discover"] = d

    s = sub.add_parser("simplify",
                       help="normalize expressions from stdin, one per line")
    s.add_argument("--rules", default=None, help="rules file path")
    s.add_argument("--lmax", type=int, default=None,
                   help="ignore rules with patterns longer than this")
    s.add_argument("--budget", type=int, default=10,
                   help="maximum rule/cancellation sweep pairs (default 10)")
    s.add_argument("--stats", action="store_true",
                   help="append per-line seconds and length ratio")
    _add_common(s)
    parsers["simplify"] = s

    g = sub.add_parser("generate",
                       help="emit a synthetic training dataset")
    g.add_argument("--dims", type=int, default=None,
                   help="input dimensionality (required)")
    g.add_argument("--count", type=int, default=None,
                   help="accepted instances to write (required)")
    g.add_argument("--rules", default=None, help="rules file path")
    g.add_argument("--lmax", type=int, default=None,
                   help="engine pattern-length cap (default 4)")
    g.add_argument("--holdout", default=None,
                   help="file of hold-out skeletons to decontaminate against")
    _add_common(g)
    parsers["generate"] = g

    b = sub.add_parser("bench",
                       help="time the engine on sampled expressions")
    b.add_argument("--rules", default=None,
                   help="rules file path (required)")
    b.add_argument("--count", type=int, default=65536,
                   help="expressions to sample (default 65536)")
    b.add_argument("--dims", type=int, default=4,
                   help="variables in the sampling law (default 4)")
    b.add_argument("--lmax", type=int, default=None,
                   help="ignore rules with patterns longer than this")
    b.add_argument("--budget", type=int, default=10,
                   help="maximum rule/cancellation sweep pairs (default 10)")
    _add_common(b)
    parsers["bench"] = b

    c = sub.add_parser("score",
                       help="score predicted skeletons against ground truth")
    c.add_argument("pred", help="predicted skeletons, one line per case; "
                                "';' separates candidates")
    c.add_argument("truth", help="ground-truth skeletons, one per line")
    c.add_argument("--data", default=None,
                   help="directory of per-case data files <case>.txt")
    c.add_argument("--gamma", type=float, default=0.05,
                   help="parsimony weight for candidate selection")
    c.add_argument("--restarts", type=int, default=8,
                   help="random restarts per constant fit (default 8)")
    _add_common(c)
    parsers["score"] = c

    return top, parsers


def _apply_config_file(top: argparse.ArgumentParser,
                       parsers: dict[str, argparse.ArgumentParser],
                       ns: argparse.Namespace,
                       argv: Sequence[str] | None) -> argparse.Namespace:
    if getattr(ns, "config", None) is None:
        return ns
    with open(ns.config, "r", encoding="utf-8") as fh:
        loaded = json.load(fh)
    if not isinstance(loaded, dict):
        raise CliError(f"config file {ns.config}: expected a JSON object")
    sp = parsers[ns.command]
    known = {a.dest for a in sp._actions if a.dest != "help"}
    unknown = sorted(set(loaded) - known)
    if unknown:
        raise CliError(f"config file {ns.config}: unknown keys {unknown}")
    sp.set_defaults(**loaded)
    # reparse so explicit command-line flags keep priority
    return top.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    top, parsers = build_parser()
    ns = top.parse_args(argv)
    try:
        ns = _apply_config_file(top, parsers, ns, argv)
        return _COMMANDS[ns.command](ns)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, RulesFileError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
