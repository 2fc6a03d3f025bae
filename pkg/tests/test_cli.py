import json
import subprocess
import sys

import pytest

from ndscc import cli, io

FAST = ["--set", "acquisition.n_bins=120", "--set", "acquisition.shots=1000000"]


def _run(*argv):
    return cli.main([str(a) for a in argv])


def _bytes(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()
            and p.name != io.MANIFEST_NAME}


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert _run("simulate", "--out", out, *FAST) == cli.EXIT_OK
    return out


@pytest.fixture(scope="module")
def fit_dir(tmp_path_factory, sim_dir):
    out = tmp_path_factory.mktemp("fit")
    assert _run("fit", *sorted(sim_dir.glob("trace_*.txt")), "--out", out, *FAST) == cli.EXIT_OK
    return out


def test_simulate_writes_eight_traces(sim_dir):
    traces = sorted(sim_dir.glob("trace_*.txt"))
    assert len(traces) == 8
    assert {io.read_trace(p).pump_label.value for p in traces} == {"PUMP_532", "PUMP_592"}
    man = io.read_manifest(sim_dir)
    assert man.command == "simulate" and set(man.outputs) == {p.name for p in traces}
    assert man.config["acquisition"]["n_bins"] == 120 and man.seed == man.config["seed"]


def test_simulate_is_byte_identical(tmp_path, sim_dir):
    assert _run("simulate", "--out", tmp_path, *FAST) == cli.EXIT_OK
    assert _bytes(tmp_path) == _bytes(sim_dir)


def test_seed_override_changes_traces(tmp_path, sim_dir):
    assert _run("simulate", "--out", tmp_path, "--seed", 1, *FAST) == cli.EXIT_OK
    assert _bytes(tmp_path) != _bytes(sim_dir)
    assert io.read_manifest(tmp_path).seed == 1


def test_fit_records_and_select(fit_dir, tmp_path):
    fits = sorted(fit_dir.glob("fit_trace_*.json"))
    assert len(fits) == 8
    doc = io.read_doc(fits[0], "selection")
    assert set(doc["fits"]) == {"1", "2", "3"} and doc["chosen_n"] in (1, 2, 3)
    assert abs(sum(doc["weights"].values()) - 1) < 1e-12
    cols, rows = io.read_table(fit_dir / "fit_summary.tsv")
    assert cols[:4] == ["source", "pump", "probe_power_mW", "chosen_n"] and len(rows) == 8
    assert _run("select", *fits, "--out", tmp_path) == cli.EXIT_OK
    _, hist = io.read_table(tmp_path / "chosen_n_histogram.tsv")
    assert sum(int(r[2]) for r in hist) == 8


def test_fit_rerun_identical(fit_dir, sim_dir, tmp_path):
    assert _run("fit", *sorted(sim_dir.glob("trace_*.txt")), "--out", tmp_path, *FAST) == cli.EXIT_OK
    assert _bytes(tmp_path) == _bytes(fit_dir)


def test_fit_continues_past_bad_file(sim_dir, tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("not a trace\n")
    good = sorted(sim_dir.glob("trace_*.txt"))[0]
    out = tmp_path / "out"
    assert _run("fit", bad, good, tmp_path / "missing.txt", "--out", out, *FAST) == cli.EXIT_OK
    errs = io.read_doc(out / "fit_errors.json", "errors")["errors"]
    assert [e["source"].split("/")[-1] for e in errs] == ["bad.txt", "missing.txt"]
    assert len(list(out.glob("fit_trace_*.json"))) == 1
    assert _run("fit", bad, "--out", tmp_path / "o2") == cli.EXIT_IO


def test_exit_codes(tmp_path, capsys):
    assert _run("fit", "--out", tmp_path) == cli.EXIT_VALIDATION
    assert "no input files" in capsys.readouterr().err
    assert _run("simulate", "--out", tmp_path, "--set", "acquisition.shots=0") == cli.EXIT_VALIDATION
    assert "acquisition.shots" in capsys.readouterr().err
    assert _run("simulate", "--out", tmp_path, "--config", tmp_path / "none.yaml") == cli.EXIT_IO
    assert _run("report", tmp_path / "nope", "--out", tmp_path / "r") == cli.EXIT_IO
    assert _run("scc-optimize", "--surface", tmp_path / "nope.json", "--out", tmp_path) == cli.EXIT_IO


def test_metrics_from_fits(fit_dir, tmp_path):
    fits = sorted(fit_dir.glob("fit_trace_*.json"))
    assert _run("metrics", *fits, "--out", tmp_path) == cli.EXIT_OK
    doc = io.read_doc(tmp_path / "metrics.json", "metrics")
    assert 0 < doc["contrast_pct"] < 100 and doc["peak"]["snr"] > 0
    only_532 = [f for f in fits if "532nm" in f.name]
    assert _run("metrics", *only_532, "--out", tmp_path / "x") == cli.EXIT_VALIDATION


def test_scc_commands_and_yaml(tmp_path):
    surf = tmp_path / "surf"
    assert _run("scc-surface", "--expected", "--out", surf, "--format", "yaml") == cli.EXIT_OK
    doc = io.read_doc(surf / "surface.yaml", "surface")
    assert doc["source"] == "EXPECTED"
    opt = tmp_path / "opt"
    assert _run("scc-optimize", "--surface", surf / "surface.yaml", "--out", opt) == cli.EXIT_OK
    sp = io.read_doc(opt / "speedup.json", "speedup")
    assert sp["break_even_s"] is not None and sp["asymptote"] > 1
    assert io.read_manifest(opt).inputs


def test_report_empty_dir_warns(tmp_path, caplog):
    empty = tmp_path / "empty"
    empty.mkdir()
    with caplog.at_level("WARNING", logger="ndscc"):
        assert _run("report", empty, "--out", tmp_path / "r") == cli.EXIT_OK
    assert any("empty report" in r.message for r in caplog.records)
    doc = io.read_doc(tmp_path / "r" / "report.json", "report")
    assert doc["documents"] == 0 and "no survey results" in doc["gaps"]


def test_report_idempotent_with_gaps(fit_dir, tmp_path):
    res = tmp_path / "res"
    assert _run("metrics", *sorted(fit_dir.glob("fit_trace_*.json")), "--out", res / "m") == 0
    assert _run("scc-optimize", "--expected", "--out", res / "s") == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run("report", res, "--out", a) == 0
    assert _run("report", res, "--out", b) == 0
    assert _bytes(a) == _bytes(b)
    doc = io.read_doc(a / "report.json", "report")
    assert "no survey results" in doc["gaps"] and "no metrics results" not in doc["gaps"]
    assert (a / "speedup_s_speedup.tsv").is_file() and list(a.glob("snr_curve_*.tsv"))


def test_replay_identical_and_mismatch(sim_dir, tmp_path, capsys):
    assert _run("replay", sim_dir, "--out", tmp_path / "r1") == cli.EXIT_OK
    assert "identical" in capsys.readouterr().out
    assert _bytes(tmp_path / "r1") == _bytes(sim_dir)
    doc = json.loads((sim_dir / io.MANIFEST_NAME).read_text())
    name = sorted(doc["outputs"])[0]
    doc["outputs"][name] = "0" * 64
    tampered = tmp_path / "tampered.json"
    tampered.write_text(json.dumps(doc))
    assert _run("replay", tampered, "--out", tmp_path / "r2") == cli.EXIT_MISMATCH
    assert name in capsys.readouterr().err


def test_replay_rejects_changed_input(sim_dir, tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    trace = sorted(sim_dir.glob("trace_*.txt"))[0]
    copy = src / trace.name
    copy.write_bytes(trace.read_bytes())
    assert _run("fit", copy, "--out", tmp_path / "f", *FAST) == 0
    copy.write_text(copy.read_text() + "\n")
    assert _run("replay", tmp_path / "f", "--out", tmp_path / "g") == cli.EXIT_IO


def test_console_script_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "ndscc.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("ndscc ")
    r = subprocess.run([sys.executable, "-m", "ndscc.cli", "fit", "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 2
