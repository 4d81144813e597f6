import json
import subprocess
import sys

import numpy as np
import pytest

from rlsmerge import cli
from rlsmerge.adapters import materialize_task_vector
from rlsmerge.store import load_bundle, save_bundle

from cli_cases import CASES, STREAM_ARGS, run


@pytest.mark.parametrize("name", sorted(CASES))
def test_command_matches_library(tmp_path, name):
    got, want = CASES[name](tmp_path)
    assert got == want


def test_eval_on_oracle_report_has_zero_ffm(tmp_path):
    CASES["eval"](tmp_path)
    doc = json.loads((tmp_path / "e.json").read_text())
    assert abs(doc["metrics"]["FFM"]) <= 1e-9


def test_help_lists_defaults(capsys):
    for cmd, needles in {
        "assemble": ["3.0"],
        "simulate": ["0.999", "0.1", "16", "(0, 1]"],
        "fit": ["16"],
        "sweep": ["RLSMERGE_WORKERS"],
    }.items():
        with pytest.raises(SystemExit) as exc:
            cli.main([cmd, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for n in needles:
            assert n in text, (cmd, n)


def _error(capsys, argv):
    with pytest.raises(SystemExit) as exc:
        cli.main([str(a) for a in argv])
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return exc.value.code, json.loads(line)


def test_exit_codes(tmp_path, capsys):
    code, doc = _error(capsys, ["frobnicate"])
    assert code == 2 and doc["exit_code"] == 2
    assert _error(capsys, ["simulate", "--out", tmp_path / "x", "--gamma", "1.5"])[0] == 2
    assert _error(capsys, ["simulate", "--out", tmp_path / "x", "--overlap", "2"])[0] == 2
    assert _error(capsys, ["merge", "--in", tmp_path / "nope", "--features", tmp_path / "nope", "--out", tmp_path / "m"])[0] == 3
    bad = tmp_path / "bad.bundle"
    bad.write_text("{}")
    assert _error(capsys, ["eval", "--report", bad])[0] == 2
    assert _error(capsys, ["compress-stats", "--in", bad])[0] == 3
    assert not (tmp_path / "x").exists()


def test_numerical_failure_exit_code(tmp_path, capsys):
    ex = tmp_path / "ex"
    run(["simulate", *STREAM_ARGS, "--out", tmp_path / "s.json", "--export-dir", ex])
    taus = {l: materialize_task_vector(a) for l, a in load_bundle(ex / "task1.adapter.bundle").items()}
    save_bundle(taus, tmp_path / "tv.bundle")
    code, doc = _error(capsys, ["assemble", "--base", ex / "base.bundle", "--merged", tmp_path / "tv.bundle",
                                "--lambda", "1e300", "--out", tmp_path / "f.bundle"])
    assert code == 4 and doc["error"] == "numerical"


def test_config_file_overridden_by_flags(tmp_path):
    cfgp = tmp_path / "cfg.json"
    cfgp.write_text(json.dumps({"task_count": 2, "dim": 8, "samples": 16, "rank": 2, "proto_dim": 4, "seed": 3}))
    run(["simulate", "--config", cfgp, "--seed", "4", "--out", tmp_path / "r.json"])
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["config"]["task_count"] == 2 and doc["config"]["seed"] == 4


def test_unknown_config_key(tmp_path, capsys):
    cfgp = tmp_path / "cfg.json"
    cfgp.write_text(json.dumps({"tasks": 2}))
    assert _error(capsys, ["simulate", "--config", cfgp, "--out", tmp_path / "r.json"])[0] == 2


def test_verbose_logs_are_json_lines(tmp_path, capsys):
    run(["simulate", *STREAM_ARGS, "--out", tmp_path / "r.json", "-v"])
    lines = [l for l in capsys.readouterr().err.splitlines() if l]
    assert lines and all(json.loads(l)["logger"] == "rlsmerge" for l in lines)


def test_figures_written(tmp_path):
    run(["simulate", *STREAM_ARGS, "--out", tmp_path / "r.json", "--figure", tmp_path / "r.png"])
    run(["sweep", *STREAM_ARGS, "--lambdas", "1,2", "--gammas", "full,0.9,1.0", "--out", tmp_path / "s.csv",
         "--figure", tmp_path / "s.png"])
    for name in ("r.png", "s.png"):
        assert (tmp_path / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_sweep_parallel_matches_serial(tmp_path, monkeypatch):
    run(["sweep", *STREAM_ARGS, "--lambdas", "1,3", "--gammas", "full,0.99", "--out", tmp_path / "a.csv"])
    monkeypatch.setenv("RLSMERGE_WORKERS", "2")
    run(["sweep", *STREAM_ARGS, "--lambdas", "1,3", "--gammas", "full,0.99", "--out", tmp_path / "b.csv"])
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_export_roundtrip(tmp_path):
    ex = tmp_path / "ex"
    run(["simulate", *STREAM_ARGS, "--out", tmp_path / "s.json", "--export-dir", ex])
    reg = load_bundle(ex / "registry.bundle")
    assert len(reg) == 3
    assert set(load_bundle(ex / "task1.adapter.bundle")) == set(load_bundle(ex / "base.bundle"))


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "rlsmerge", "eval", "--report", tmp_path / "missing.json"],
                         capture_output=True, text=True)
    assert out.returncode == 3
    assert json.loads(out.stderr.strip())["error"] == "io"


def test_route_zero_query_is_uniform(tmp_path):
    ex = tmp_path / "ex"
    run(["simulate", *STREAM_ARGS, "--out", tmp_path / "s.json", "--export-dir", ex])
    np.save(tmp_path / "q.npy", np.zeros(6))
    run(["route", "--registry", ex / "registry.bundle", "--query", tmp_path / "q.npy", "--out", tmp_path / "r.json"])
    w = json.loads((tmp_path / "r.json").read_text())["weights"][0]
    assert np.allclose(w, 1 / 3)
