import json
import subprocess
import sys

import pytest

from wlca import cli

SMALL = {
    "data": "sim.csv", "schema": "simulated_schema.json", "k_max": 3,
    "em": {"n_starts": 12, "n_best": 3},
    "blrt": {"reps": 39, "starts": 4, "best": 2, "policy": "needed"},
    "bootstrap_reps": 5,
    "covariates": [{"item_id": "gender", "reference": 2}, {"item_id": "income", "kind": "ordinal"}],
    "robustness": {"start_counts": [3, 6]},
    "seed": 3,
}


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    sim = _write(d / "sim.json", {"simulate": {"spec": "ai_risk", "n": 700, "output": "sim.csv"}, "seed": 5, "out": "."})
    assert cli.main(["simulate", "--config", sim]) == 0
    run = _write(d / "run.json", dict(SMALL, out="out"))
    assert cli.main(["all", "--config", run]) == 0
    return d


def test_simulate_outputs(workdir):
    first = (workdir / "sim.csv").read_text().splitlines()[:2]
    assert first[0].startswith("# wlca ")
    assert "true_class" in first[1]
    truth = json.loads((workdir / "simulated_truth.json").read_text())
    assert truth["spec"]["K"] == 4 and "config_hash" in truth


def test_all_writes_every_artifact(workdir):
    out = workdir / "out"
    for name in ("diagnostics.json", "enumeration.csv", "model.json", "profiles.csv", "classes.csv",
                 "assignments.csv", "distal.csv", "odds_ratios.csv", "robustness.json", "report.md"):
        assert (out / name).exists(), name
    assert not (out / "error.json").exists()


def test_artifacts_are_stamped(workdir):
    out = workdir / "out"
    stamp = (out / "enumeration.csv").read_text().splitlines()[0]
    assert stamp.startswith("# wlca ") and "config " in stamp and "seed 3" in stamp
    meta = json.loads((out / "model.json").read_text())
    assert meta["seed"] == 3 and len(meta["config_hash"]) == 12
    assert (out / "report.md").read_text().startswith("<!--")


def test_enumeration_table(workdir):
    lines = [l for l in (workdir / "out" / "enumeration.csv").read_text().splitlines() if not l.startswith("#")]
    header = lines[0].split(",")
    for col in ("K", "LL", "n_par", "BIC", "SABIC", "Entropy", "BLRT_p", "VLMR_p"):
        assert col in header
    assert [l.split(",")[0] for l in lines[1:]] == ["1", "2", "3"]


def test_rerun_is_byte_identical(workdir):
    run = _write(workdir / "run_b.json", dict(SMALL, out="out_b"))
    assert cli.main(["all", "--config", run]) == 0
    a, b = workdir / "out", workdir / "out_b"
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n


def test_overrides_change_the_hash(workdir):
    assert cli.main(["enumerate", "--config", str(workdir / "run.json"), "--kmax", "1", "--out", str(workdir / "k1")]) == 0
    lines = [l for l in (workdir / "k1" / "enumeration.csv").read_text().splitlines() if not l.startswith("#")]
    assert len(lines) == 2
    h1 = json.loads((workdir / "k1" / "enumeration.json").read_text())["config_hash"]
    h0 = json.loads((workdir / "out" / "enumeration.json").read_text())["config_hash"]
    assert h1 != h0


def test_missing_model_exits_2(workdir):
    run = _write(workdir / "nomodel.json", dict(SMALL, out="empty"))
    assert cli.main(["bch", "--config", run]) == 2
    err = json.loads((workdir / "empty" / "error.json").read_text())
    assert err["exit_code"] == 2 and err["stage"] == "bch"


def test_unknown_key_exits_2(workdir, capsys):
    run = _write(workdir / "bad.json", dict(SMALL, out="bad", kmax=3))
    assert cli.main(["fit", "--config", run]) == 2
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["error_type"] == "ConfigError"


def test_conditioning_guard_exits_4(workdir):
    run = _write(workdir / "guard.json", dict(SMALL, out="out", max_condition=1.0))
    assert cli.main(["bch", "--config", run]) == 4
    assert json.loads((workdir / "out" / "error.json").read_text())["exit_code"] == 4
    assert cli.main(["bch", "--config", str(workdir / "run.json")]) == 0
    assert not (workdir / "out" / "error.json").exists()


def test_unexpected_failure_exits_3(workdir, monkeypatch):
    def boom(self):
        raise RuntimeError("boom")
    monkeypatch.setattr(cli.Pipeline, "report", boom)
    assert cli.main(["report", "--config", str(workdir / "run.json"), "--out", str(workdir / "boom")]) == 3
    assert json.loads((workdir / "boom" / "error.json").read_text())["error_type"] == "RuntimeError"


def test_console_entry_point(workdir):
    r = subprocess.run([sys.executable, "-m", "wlca.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "diagnose" in r.stdout
