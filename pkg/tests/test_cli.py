import json

import pytest

from ntrflab.cli import int_list, main, read_config
from ntrflab.data import load_csv, load_dataset
from ntrflab.errors import InvalidInputError
from ntrflab.trainer import load_weights


def run(capsys, *argv):
    rc = main([str(a) for a in argv])
    return rc, capsys.readouterr()


def test_gen_writes_matching_files(tmp_path, capsys):
    rc, out = run(capsys, "gen", "--n", 30, "--d", 4, "--gamma", 0.2, "--seed", 3,
                  "--out", tmp_path)
    assert rc == 0
    assert json.loads(out.out)["n"] == 30
    a, b = load_csv(tmp_path / "dataset.csv"), load_dataset(tmp_path / "dataset.bin")
    assert a.X.tobytes() == b.X.tobytes() and a.y.tobytes() == b.y.tobytes()


def test_train_gd_and_reuse_data_file(tmp_path, capsys):
    run(capsys, "gen", "--n", 20, "--d", 4, "--out", tmp_path)
    rc, out = run(capsys, "train-gd", "--data", tmp_path / "dataset.csv", "--m", 16, "--T", 30,
                  "--snapshot-every", 10, "--out", tmp_path / "gd")
    assert rc == 0
    summary = json.loads(out.out)
    assert summary["steps"] == 30
    lines = (tmp_path / "gd" / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 31
    assert load_weights(tmp_path / "gd" / "final.bin").shape.m == 16


def test_train_sgd(tmp_path, capsys):
    rc, out = run(capsys, "train-sgd", "--n", 25, "--d", 4, "--m", 8, "--out", tmp_path)
    assert rc == 0 and json.loads(out.out)["examples"] == 25
    assert (tmp_path / "chosen.bin").exists()


def test_ntrf_fit_probe_and_sep(tmp_path, capsys):
    common = ["--n", 20, "--d", 4, "--m", 16, "--out", tmp_path]
    rc, out = run(capsys, "ntrf-fit", "--steps", 50, *common)
    assert rc == 0 and json.loads(out.out)["eps_ntrf"] > 0
    rc, out = run(capsys, "probe", "--gd-steps", 20, "--random-budget", 1, *common)
    rep = json.loads(out.out)
    assert rc == 0 and rep["tau"] == pytest.approx(3 ** 0.5 * 5 / 4)
    rc, out = run(capsys, "sep", "--iterations", 20, "--k", 100, *common)
    assert rc == 0
    assert set(json.loads(out.out)) == {"phi", "ntrf_margin", "shallow_margin"}


def test_bounds_prints_banner(tmp_path, capsys):
    rc, out = run(capsys, "bounds", "--out", tmp_path)
    assert rc == 0
    assert "NOTE" in out.err
    assert json.loads((tmp_path / "bounds.json").read_text())["term_a"] == pytest.approx(64.0)


def test_config_file_sets_defaults_and_flags_win(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# small run\nn = 12\nd = 3\ngamma = 0.3  # wide margin\n")
    rc, out = run(capsys, "gen", "--config", cfg, "--out", tmp_path)
    assert rc == 0 and json.loads(out.out)["n"] == 12
    rc, out = run(capsys, "gen", "--config", cfg, "--n", 7, "--out", tmp_path)
    assert json.loads(out.out)["n"] == 7
    assert load_csv(tmp_path / "dataset.csv").d == 3


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = blue\n")
    assert run(capsys, "gen", "--config", bad, "--out", tmp_path)[0] == 2
    assert run(capsys, "gen", "--n", 0, "--out", tmp_path)[0] == 2
    assert run(capsys, "bounds", "--delta", 2, "--out", tmp_path)[0] == 2
    assert run(capsys, "gen", "--data", tmp_path / "missing.csv", "--out", tmp_path)[0] == 4
    # rejection sampling cannot find a margin this wide
    assert run(capsys, "gen", "--n", 50000, "--d", 2, "--gamma", 0.999, "--out", tmp_path)[0] == 3
    with pytest.raises(SystemExit) as err:
        main(["gen", "--n", "many"])
    assert err.value.code == 2


def test_helpers(tmp_path):
    assert int_list("1, 2,3") == [1, 2, 3]
    p = tmp_path / "c.cfg"
    p.write_text("m-grid = 4,8\n\n")
    assert read_config(p) == {"m_grid": "4,8"}
    p.write_text("oops\n")
    with pytest.raises(InvalidInputError):
        read_config(p)
