import json

import pytest

from npsc.cli import main


def test_run_command(tmp_path, capsys):
    out = tmp_path / "r.csv"
    assert main(["run", "--problem", "ex1", "--neurons", "4", "--epochs", "2", "--quad-points", "201",
                 "--out", str(out)]) == 0
    assert (tmp_path / "r_seed0.csv").exists() and (tmp_path / "r_mean.csv").exists()
    assert "seed 0" in capsys.readouterr().out


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"problem": "ex3", "neurons": 4, "epochs": 5, "quad_points": 201,
                               "out": str(tmp_path / "x.csv")}))
    assert main(["run", "--config", str(cfg), "--epochs", "2"]) == 0
    lines = (tmp_path / "x_seed0.csv").read_text().splitlines()
    assert len(lines) == 3


def test_bad_config_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"nope": 1}))
    with pytest.raises(SystemExit):
        main(["run", "--config", str(cfg)])


def test_invalid_combination_reports_error(tmp_path, capsys):
    assert main(["run", "--problem", "ex3", "--precond", "diag", "--epochs", "1"]) == 2
    assert "error" in capsys.readouterr().err


def test_illcond_command(tmp_path):
    out = tmp_path / "ill.csv"
    assert main(["illcond", "--neurons", "16", "--iters", "50", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 51
    assert (tmp_path / "ill_summary.csv").exists()


def test_precond_table_command(tmp_path):
    out = tmp_path / "t.csv"
    assert main(["precond-table", "--problem", "ex2", "--max-iter", "50", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "n,gd,adam,cg,pcg"
    assert lines[1].startswith("16,>50,>50,")
