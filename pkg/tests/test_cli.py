import json
import subprocess
import sys

import pytest

from nof1embed.cli import main


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return path


def _config(tmp_path, **kw):
    d = {
        "seed": 2,
        "synth": {"participants": ["a", "b"]},
        "autoencoder": {"input_hw": [32, 32], "epochs": 1},
        "tests": ["t", "scrt"],
        "figures": False,
        "output_dir": str(tmp_path / "out"),
    }
    d.update(kw)
    return _write(tmp_path / "config.json", d)


def test_run_prints_table_and_exits_zero(tmp_path, capsys):
    assert main(["run", "--config", str(_config(tmp_path))]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "participant_id,t,scrt"
    assert [l.split(",")[0] for l in lines[1:]] == ["a", "b"]
    assert (tmp_path / "out" / "report.json").exists()


def test_seed_and_out_overrides(tmp_path):
    cfg = _config(tmp_path)
    assert main(["run", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / "o5")]) == 0
    report = json.loads((tmp_path / "o5" / "report.json").read_text())
    assert report["config"]["seed"] == 5


@pytest.mark.parametrize(
    "patch, code",
    [
        ({"tests": []}, 1),
        ({"seed": "x"}, 1),
        ({"synth": None, "data_path": "/nonexistent/trial"}, 2),
        ({"autoencoder": {"input_hw": [32, 32], "epochs": 1, "learning_rate": 1e30}}, 3),
    ],
)
def test_exit_codes(tmp_path, capsys, patch, code):
    assert main(["run", "--config", str(_config(tmp_path, **patch))]) == code
    assert capsys.readouterr().err.startswith("error: ")


def test_missing_config_file_is_config_error(tmp_path):
    assert main(["run", "--config", str(tmp_path / "none.json")]) == 1


def test_synth_then_run_from_disk(tmp_path, capsys):
    spec = _write(tmp_path / "spec.json", {"participants": ["p"], "spec": {"seed": 9}})
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "data")]) == 0
    assert (tmp_path / "data" / "metadata.csv").read_text().startswith("participant_id,day,slot")
    assert (tmp_path / "data" / "reference_scores.csv").exists()
    cfg = _config(tmp_path, synth=None, data_path=str(tmp_path / "data"))
    assert main(["run", "--config", str(cfg)]) == 0
    assert capsys.readouterr().out.splitlines()[-1].startswith("p,")


def test_report_subcommand_renders_figures(tmp_path, capsys):
    assert main(["run", "--config", str(_config(tmp_path))]) == 0
    out = tmp_path / "out"
    assert not list(out.glob("*.svg"))
    capsys.readouterr()
    assert main(["report", "--in", str(out)]) == 0
    assert sorted(p.name for p in out.glob("*.svg")) == ["loss.svg", "participant_a.svg", "participant_b.svg"]
    assert capsys.readouterr().out.startswith("participant_id,t,scrt")


def test_report_on_empty_dir_is_data_error(tmp_path):
    assert main(["report", "--in", str(tmp_path)]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "nof1embed", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "synth" in res.stdout and "report" in res.stdout
