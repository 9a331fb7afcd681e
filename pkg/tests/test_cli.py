"""Tests for the command-line interface: subcommand contracts, manifest
emission, determinism, worker independence, and exit codes."""
import io
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from prenorm.cli import main
from prenorm.datagen import read_dataset
from prenorm.expr import canonicalize, format_prefix, parse_prefix
from prenorm.metrics import report_header
from prenorm.rules import load_rules

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")
FULL_RULES = os.path.join(FIXTURES, "rules_full_lmax5.txt")


def run_cli(argv, monkeypatch, capsys, stdin_text=None):
    """Invoke main() in process; returns (exit code, stdout, stderr)."""
    if stdin_text is not None:
        monkeypatch.setattr("sys.stdin", io.StringIO(stdin_text))
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def manifest_of(err_text):
    """Parse the run manifest from the last diagnostics line."""
    last = err_text.strip().splitlines()[-1]
    blob = json.loads(last)
    assert set(blob) == {"command", "config", "seed", "versions", "timings"}
    return blob


def determinism_key(blob):
    return json.dumps({k: blob[k] for k in
                       ("command", "config", "seed", "versions")},
                      sort_keys=True)


@pytest.fixture(scope="module")
def toy_rules(tmp_path_factory):
    """Small rules file discovered over {+, -, neg, x1, x2, 0, 1}."""
    path = tmp_path_factory.mktemp("cli") / "toy_rules.txt"
    code = main(["discover", "--dims", "2", "--ops", "+,-,neg",
                 "--lits", "0,1", "--lmax", "3", "--out", str(path)])
    assert code == 0
    return str(path)


# ---------------------------------------------------------------------------
# discover
# ---------------------------------------------------------------------------

class TestDiscover:
    def test_emits_loadable_rules_file(self, toy_rules):
        rule_set = load_rules(toy_rules)
        assert len(rule_set) > 0
        assert rule_set.l_max == 3

    def test_rerun_is_byte_identical(self, tmp_path, monkeypatch, capsys):
        argv = ["discover", "--dims", "1", "--ops", "neg,abs",
                "--lits", "0", "--lmax", "3"]
        outs, keys = [], []
        for name in ("a.txt", "b.txt"):
            path = tmp_path / name
            code, _, err = run_cli(argv + ["--out", str(path)],
                                   monkeypatch, capsys)
            assert code == 0
            outs.append(path.read_bytes())
            keys.append(determinism_key(manifest_of(err)))
        assert outs[0] == outs[1]
        # the out path differs, so compare keys with it blanked
        a, b = (json.loads(k) for k in keys)
        a["config"].pop("out"), b["config"].pop("out")
        assert a == b

    def test_progress_reported_per_level(self, tmp_path, monkeypatch, capsys):
        path = tmp_path / "r.txt"
        _, _, err = run_cli(["discover", "--dims", "1", "--ops", "neg,abs",
                             "--lits", "0", "--lmax", "3",
                             "--out", str(path)], monkeypatch, capsys)
        assert "level 2:" in err and "level 3:" in err

    def test_unknown_operator_name_is_fatal(self, monkeypatch, capsys):
        code, _, err = run_cli(["discover", "--dims", "1", "--ops", "nope",
                                "--lits", "0", "--lmax", "2"],
                               monkeypatch, capsys)
        assert code == 2
        assert "error:" in err


# ---------------------------------------------------------------------------
# simplify
# ---------------------------------------------------------------------------

class TestSimplify:
    def test_worked_example_line(self, monkeypatch, capsys):
        # |x1/2|^2 + c1*e^(x2-x2) + c2 collapses to c1 + (x1/2)^2
        code, out, _ = run_cli(
            ["simplify", "--rules", FULL_RULES, "--lmax", "4"],
            monkeypatch, capsys,
            stdin_text="+ + pow2 abs div2 x1 * C exp - x2 x2 C\n")
        assert code == 0
        want = canonicalize(parse_prefix("+ C pow2 div2 x1"))
        assert out == format_prefix(want) + "\n"

    def test_empty_input_empty_output(self, monkeypatch, capsys):
        code, out, err = run_cli(["simplify"], monkeypatch, capsys,
                                 stdin_text="")
        assert code == 0
        assert out == ""
        manifest_of(err)

    def test_malformed_line_among_valid(self, toy_rules, monkeypatch, capsys):
        text = "neg neg x1\n+ x1 bogus\n- x2 x2\n"
        code, out, err = run_cli(["simplify", "--rules", toy_rules],
                                 monkeypatch, capsys, stdin_text=text)
        assert code == 1
        assert out == "x1\n0\n"
        assert "line 2:" in err

    def test_order_preserved(self, toy_rules, monkeypatch, capsys):
        lines = ["neg neg x1", "+ 0 x2", "- + x1 x2 + x2 x1", "x1"]
        code, out, _ = run_cli(["simplify", "--rules", toy_rules],
                               monkeypatch, capsys,
                               stdin_text="\n".join(lines) + "\n")
        assert code == 0
        assert out.splitlines() == ["x1", "x2", "0", "x1"]

    def test_stats_appends_time_and_ratio(self, toy_rules, monkeypatch,
                                          capsys):
        code, out, _ = run_cli(["simplify", "--rules", toy_rules, "--stats"],
                               monkeypatch, capsys,
                               stdin_text="neg neg x1\nx2\n")
        assert code == 0
        rows = [line.split("\t") for line in out.splitlines()]
        assert [r[0] for r in rows] == ["x1", "x2"]
        for _, stats in rows:
            seconds, ratio = (float(v) for v in stats.split())
            assert seconds >= 0.0
            assert 0.0 < ratio <= 1.0

    def test_rerun_byte_identical_with_equal_keys(self, toy_rules,
                                                  monkeypatch, capsys):
        text = "neg neg x1\n+ 0 + x1 0\n"
        runs = []
        for _ in range(2):
            code, out, err = run_cli(["simplify", "--rules", toy_rules],
                                     monkeypatch, capsys, stdin_text=text)
            assert code == 0
            runs.append((out, determinism_key(manifest_of(err))))
        assert runs[0] == runs[1]

    def test_workers_do_not_change_output(self, toy_rules, monkeypatch,
                                          capsys):
        text = "".join(f"+ neg x1 + x1 x{1 + i % 2}\n" for i in range(40))
        outs = []
        for w in ("1", "2"):
            code, out, _ = run_cli(["simplify", "--rules", toy_rules,
                                    "--workers", w],
                                   monkeypatch, capsys, stdin_text=text)
            assert code == 0
            outs.append(out)
        assert outs[0] == outs[1]

    def test_missing_rules_file_is_fatal(self, monkeypatch, capsys):
        code, _, err = run_cli(["simplify", "--rules", "/nonexistent.txt"],
                               monkeypatch, capsys, stdin_text="x1\n")
        assert code == 2
        assert "error:" in err


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

class TestGenerate:
    def test_count_zero_header_only(self, tmp_path, monkeypatch, capsys):
        path = tmp_path / "empty.txt"
        code, _, err = run_cli(["generate", "--dims", "2", "--count", "0",
                                "--out", str(path)], monkeypatch, capsys)
        assert code == 0
        lines = path.read_text().splitlines()
        assert len(lines) == 1 and lines[0].startswith("# ")
        assert "accepted 0 of 0 attempts" in err

    def test_same_seed_identical_files(self, toy_rules, tmp_path,
                                       monkeypatch, capsys):
        blobs = []
        for name in ("a.txt", "b.txt"):
            path = tmp_path / name
            code, _, _ = run_cli(["generate", "--dims", "2", "--count", "2",
                                  "--rules", toy_rules, "--seed", "5",
                                  "--out", str(path)], monkeypatch, capsys)
            assert code == 0
            blobs.append(path.read_bytes())
        assert blobs[0] == blobs[1]

    def test_dataset_round_trips(self, toy_rules, tmp_path, monkeypatch,
                                 capsys):
        path = tmp_path / "ds.txt"
        code, _, _ = run_cli(["generate", "--dims", "2", "--count", "3",
                              "--rules", toy_rules, "--seed", "5",
                              "--out", str(path)], monkeypatch, capsys)
        assert code == 0
        with open(path) as fh:
            cfg, instances = read_dataset(fh)
        assert cfg.dims == 2 and cfg.seed == 5
        assert len(instances) == 3
        for inst in instances:
            assert np.isfinite(inst.y).all()

    def test_holdout_triggers_contamination(self, toy_rules, tmp_path,
                                            monkeypatch, capsys):
        # poison the holdout with a skeleton the same seed produced
        first = tmp_path / "first.txt"
        run_cli(["generate", "--dims", "2", "--count", "1", "--rules",
                 toy_rules, "--seed", "5", "--out", str(first)],
                monkeypatch, capsys)
        with open(first) as fh:
            _, (inst, *_) = read_dataset(fh)
        holdout = tmp_path / "holdout.txt"
        holdout.write_text(format_prefix(inst.skeleton) + "\n")

        poisoned = tmp_path / "second.txt"
        code, _, err = run_cli(
            ["generate", "--dims", "2", "--count", "1", "--rules", toy_rules,
             "--seed", "5", "--holdout", str(holdout), "--out",
             str(poisoned)], monkeypatch, capsys)
        assert code == 0
        assert "Contaminated=" in err

    def test_workers_do_not_change_output(self, toy_rules, tmp_path,
                                          monkeypatch, capsys):
        blobs = []
        for w in ("1", "2"):
            path = tmp_path / f"w{w}.txt"
            code, _, _ = run_cli(["generate", "--dims", "2", "--count", "3",
                                  "--rules", toy_rules, "--seed", "9",
                                  "--workers", w, "--out", str(path)],
                                 monkeypatch, capsys)
            assert code == 0
            blobs.append(path.read_bytes())
        assert blobs[0] == blobs[1]

    def test_missing_dims_is_fatal(self, monkeypatch, capsys):
        code, _, err = run_cli(["generate", "--count", "1"],
                               monkeypatch, capsys)
        assert code == 2
        assert "--dims" in err


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

class TestBench:
    def test_smoke_run_completes(self, toy_rules, monkeypatch, capsys):
        code, out, err = run_cli(["bench", "--rules", toy_rules, "--count",
                                  "100", "--dims", "2"], monkeypatch, capsys)
        assert code == 0
        rows = [l for l in out.splitlines() if not l.startswith("#")]
        trailer = [l for l in out.splitlines() if l.startswith("#")]
        assert len(rows) == 100
        assert any(l.startswith("# time_ms") for l in trailer)
        assert any(l.startswith("# ratio") for l in trailer)
        manifest_of(err)

    def test_ratios_at_most_one(self, toy_rules, monkeypatch, capsys):
        _, out, _ = run_cli(["bench", "--rules", toy_rules, "--count", "60",
                             "--dims", "2", "--seed", "3"],
                            monkeypatch, capsys)
        for line in out.splitlines():
            if line.startswith("#"):
                continue
            idx, len_in, len_out, ratio, seconds = line.split()
            assert int(len_out) <= int(len_in)
            assert 0.0 < float(ratio) <= 1.0
            assert float(seconds) >= 0.0

    def test_rules_flag_required(self, monkeypatch, capsys):
        code, _, err = run_cli(["bench", "--count", "5"], monkeypatch, capsys)
        assert code == 2
        assert "--rules" in err


# ---------------------------------------------------------------------------
# score
# ---------------------------------------------------------------------------

def write_case(data_dir, case, x, y):
    rows = np.column_stack([x, y])
    with open(os.path.join(data_dir, f"{case}.txt"), "w") as fh:
        for row in rows:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


@pytest.fixture()
def score_files(tmp_path):
    """Two cases with data: y = x1 + 2 and y = 3 * x1."""
    rng = np.random.default_rng(0)
    data = tmp_path / "data"
    data.mkdir()
    x = rng.uniform(-5.0, 5.0, size=(64, 1))
    write_case(str(data), 0, x, x[:, 0] + 2.0)
    write_case(str(data), 1, x, 3.0 * x[:, 0])
    truth = tmp_path / "truth.txt"
    truth.write_text("+ x1 C\n* C x1\n")
    return tmp_path, str(data), str(truth)


class TestScore:
    def test_pred_equals_truth_perfect_rates(self, score_files, monkeypatch,
                                             capsys):
        tmp_path, data, truth = score_files
        pred = tmp_path / "pred.txt"
        pred.write_text("+ x1 C\n* C x1\n")
        code, out, _ = run_cli(["score", str(pred), truth, "--data", data],
                               monkeypatch, capsys)
        assert code == 0
        lines = out.splitlines()
        assert lines[0] == report_header()
        rates = {l.split()[1]: float(l.split()[2])
                 for l in lines if l.startswith("#")}
        assert rates["srr"] == 1.0
        assert rates["nrr"] == 1.0
        assert rates["token_f1"] == 1.0

    def test_bootstrap_ci_emitted_for_rates(self, score_files, monkeypatch,
                                            capsys):
        tmp_path, data, truth = score_files
        pred = tmp_path / "pred.txt"
        pred.write_text("+ x1 C\nx1\n")
        code, out, _ = run_cli(["score", str(pred), truth, "--data", data],
                               monkeypatch, capsys)
        assert code == 0
        for label in ("# srr", "# token_f1", "# nrr"):
            row = next(l for l in out.splitlines() if l.startswith(label))
            assert " ci " in row
            _, _, rate, _, lo, hi = row.split()
            assert float(lo) <= float(rate) <= float(hi)

    def test_candidate_selection_prefers_fit(self, score_files, monkeypatch,
                                             capsys):
        tmp_path, data, truth = score_files
        # first candidate underfits; selection must pick the second
        pred = tmp_path / "pred.txt"
        pred.write_text("x1 ; + x1 C\n* C x1 ; + C C\n")
        code, out, _ = run_cli(["score", str(pred), truth, "--data", data],
                               monkeypatch, capsys)
        assert code == 0
        rows = [l.split() for l in out.splitlines()
                if l and not l.startswith("#") and l != report_header()]
        assert [r[1] for r in rows] == ["1", "1"]  # srr column

    def test_without_data_scores_first_candidate(self, score_files,
                                                 monkeypatch, capsys):
        tmp_path, _, truth = score_files
        pred = tmp_path / "pred.txt"
        pred.write_text("+ x1 C\n* C x1\n")
        code, out, _ = run_cli(["score", str(pred), truth],
                               monkeypatch, capsys)
        assert code == 0
        assert not any(l.startswith("# nrr") for l in out.splitlines())

    def test_line_count_mismatch_is_fatal(self, score_files, monkeypatch,
                                          capsys):
        tmp_path, _, truth = score_files
        pred = tmp_path / "pred.txt"
        pred.write_text("+ x1 C\n")
        code, _, err = run_cli(["score", str(pred), truth],
                               monkeypatch, capsys)
        assert code == 2
        assert "error:" in err

    def test_malformed_case_is_partial(self, score_files, monkeypatch,
                                       capsys):
        tmp_path, data, truth = score_files
        pred = tmp_path / "pred.txt"
        pred.write_text("+ x1 bogus\n* C x1\n")
        code, out, err = run_cli(["score", str(pred), truth, "--data", data],
                                 monkeypatch, capsys)
        assert code == 1
        assert "case 0:" in err
        rows = [l for l in out.splitlines()
                if l and not l.startswith("#") and l != report_header()]
        assert len(rows) == 1 and rows[0].startswith("1 ")


# ---------------------------------------------------------------------------
# config file and manifests
# ---------------------------------------------------------------------------

class TestConfigFile:
    def test_config_supplies_defaults(self, toy_rules, tmp_path, monkeypatch,
                                      capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"dims": 2, "count": 2,
                                   "rules": toy_rules, "seed": 5}))
        path = tmp_path / "out.txt"
        code, _, err = run_cli(["generate", "--config", str(cfg),
                                "--out", str(path)], monkeypatch, capsys)
        assert code == 0
        blob = manifest_of(err)
        assert blob["config"]["dims"] == 2 and blob["config"]["count"] == 2

    def test_explicit_flag_wins(self, toy_rules, tmp_path, monkeypatch,
                                capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"dims": 2, "count": 2,
                                   "rules": toy_rules}))
        path = tmp_path / "out.txt"
        code, _, err = run_cli(["generate", "--config", str(cfg),
                                "--count", "1", "--out", str(path)],
                               monkeypatch, capsys)
        assert code == 0
        assert manifest_of(err)["config"]["count"] == 1
        with open(path) as fh:
            _, instances = read_dataset(fh)
        assert len(instances) == 1

    def test_unknown_key_is_fatal(self, tmp_path, monkeypatch, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"dims": 2, "count": 1, "nope": 3}))
        code, _, err = run_cli(["generate", "--config", str(cfg)],
                               monkeypatch, capsys)
        assert code == 2
        assert "nope" in err


class TestManifest:
    def test_every_command_emits_one(self, toy_rules, tmp_path, monkeypatch,
                                     capsys):
        truth = tmp_path / "t.txt"
        truth.write_text("x1\n")
        pred = tmp_path / "p.txt"
        pred.write_text("x1\n")
        rules_out = tmp_path / "r.txt"
        ds_out = tmp_path / "d.txt"
        invocations = [
            (["discover", "--dims", "1", "--ops", "neg", "--lits", "0",
              "--lmax", "2", "--out", str(rules_out)], None),
            (["simplify", "--rules", toy_rules], "x1\n"),
            (["generate", "--dims", "1", "--count", "0",
              "--out", str(ds_out)], None),
            (["bench", "--rules", toy_rules, "--count", "5",
              "--dims", "1"], None),
            (["score", str(pred), str(truth)], None),
        ]
        for argv, stdin_text in invocations:
            code, _, err = run_cli(argv, monkeypatch, capsys, stdin_text)
            assert code == 0, argv
            blob = manifest_of(err)
            assert blob["command"] == argv[0]
            assert blob["versions"]["engine"]
            assert blob["timings"]


# ---------------------------------------------------------------------------
# console entry point
# ---------------------------------------------------------------------------

class TestEntryPoint:
    def test_installed_script_round_trip(self, toy_rules):
        proc = subprocess.run(
            [sys.executable, "-m", "prenorm.cli", "simplify",
             "--rules", toy_rules],
            input="+ x1 neg x1\n", capture_output=True, text=True,
            timeout=120)
        assert proc.returncode == 0
        assert proc.stdout == "0\n"
        json.loads(proc.stderr.strip().splitlines()[-1])

    def test_version_flag(self):
        proc = subprocess.run([sys.executable, "-m", "prenorm.cli",
                               "--version"], capture_output=True, text=True,
                              timeout=60)
        assert proc.returncode == 0
        assert proc.stdout.startswith("prenorm ")
