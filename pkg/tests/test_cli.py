import json
import subprocess
import sys

import pytest

from vctrial.cli import main
from vctrial.population import load_cohort


def write_config(path, cohort, extra="", weeks=2, titration=1):
    path.write_text(f"""[trial]
cohort = {cohort}
master_seed = 5
protocol_seed = 2
{extra}
[simulation]
trial_weeks = {weeks}
titration_weeks = {titration}
""")
    return path


@pytest.fixture
def cohort(tmp_path):
    out = tmp_path / "cohort.tsv"
    assert main(["generate-population", "--model", "hovorka", "--n", "3", "--seed", "1",
                 "--out", str(out)]) == 0
    return out


def test_generate(cohort):
    records, header = load_cohort(cohort)
    assert len(records) == 3 and header["model"] == "hovorka"


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["generate-population", "--model", "bergman", "--n", "3", "--seed", "1",
                 "--out", "x"]) == 1
    assert main(["run", "--config", "c.ini"]) == 1
    assert "usage" in capsys.readouterr().err


def test_config_errors(tmp_path, cohort):
    assert main(["run", "--config", str(tmp_path / "missing.ini"), "--out",
                 str(tmp_path / "o")]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[trial]\ncohort = cohort.tsv\nspeed = 3\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    short = write_config(tmp_path / "short.ini", cohort, weeks=1, titration=1)
    assert main(["run", "--config", str(short), "--out", str(tmp_path / "o")]) == 2
    nocohort = write_config(tmp_path / "nc.ini", tmp_path / "none.tsv")
    assert main(["run", "--config", str(nocohort), "--out", str(tmp_path / "o")]) == 2


def test_run_report_compare(tmp_path, cohort, capsys):
    cfg = write_config(tmp_path / "trial.ini", cohort.name)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(cfg), "--workers", "1", "--out", str(a)]) == 0
    assert main(["run", "--config", str(cfg), "--deterministic", "--out", str(b)]) == 0
    capsys.readouterr()

    assert main(["report", "--in", str(a)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["report"]["n_participants"] == 3

    assert main(["report", "--in", str(a), "--format", "csv"]) == 0
    text = capsys.readouterr().out
    assert text.startswith("# schema=vct-summary/1")
    assert len([ln for ln in text.splitlines() if not ln.startswith("#")]) == 4

    assert main(["compare", "--a", str(a), "--b", str(b)]) == 0
    out = capsys.readouterr().out
    assert "All targets" in out and "TIR" in out

    ha = json.loads((a / "metadata.json").read_text())["config_hash"]
    hb = json.loads((b / "metadata.json").read_text())["config_hash"]
    assert ha != hb


def test_failure_threshold(tmp_path, monkeypatch, cohort):
    import vctrial.runner as runner

    original = runner.simulate_record

    def failing(record, trial):
        run = original(record, trial)
        if record.id == 1:
            run.stats, run.failure = None, {"id": 1, "t": 0.0, "state": "Q1", "value": None}
        return run

    monkeypatch.setattr(runner, "simulate_record", failing)
    cfg = write_config(tmp_path / "t.ini", cohort.name)
    assert main(["run", "--config", str(cfg), "--workers", "1", "--out",
                 str(tmp_path / "o")]) == 3
    lax = write_config(tmp_path / "lax.ini", cohort.name, "max_failure_fraction = 0.5")
    assert main(["run", "--config", str(lax), "--workers", "1", "--out",
                 str(tmp_path / "p")]) == 0


def test_workers_env(tmp_path, monkeypatch, cohort):
    from vctrial.config import load_config

    cfg = write_config(tmp_path / "t.ini", cohort.name)
    monkeypatch.setenv("VCT_WORKERS", "4")
    assert load_config(cfg).workers == 4
    monkeypatch.setenv("VCT_WORKERS", "many")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "vctrial", "--help"], capture_output=True,
                          text=True)
    assert proc.returncode == 0 and "generate-population" in proc.stdout


def test_shared_protocol_file(tmp_path, cohort):
    from vctrial.protocol import build_year, write_protocol

    write_protocol(tmp_path / "one-week.tsv", build_year(70.0, 3, weeks=1))
    write_protocol(tmp_path / "three-weeks.tsv", build_year(70.0, 3, weeks=3))
    short = write_config(tmp_path / "s.ini", cohort.name, "protocol = one-week.tsv")
    assert main(["run", "--config", str(short), "--out", str(tmp_path / "o")]) == 2
    ok = write_config(tmp_path / "ok.ini", cohort.name, "protocol = three-weeks.tsv")
    assert main(["run", "--config", str(ok), "--workers", "1", "--out",
                 str(tmp_path / "p")]) == 0
