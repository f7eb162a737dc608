import csv
import json
import os
import subprocess
import sys

import pytest

from wursim import cli


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def sweep(tmp_path, *extra, name="out"):
    out = tmp_path / name
    code = cli.main(["sweep", "--n", "100", "--loads", "0.01,0.1", "--protocols", "tdma,wur-bs",
                     "--reps", "2", "--events", "1500", "--out", str(out), *extra])
    return code, out


def test_sweep_writes_one_row_per_cell(tmp_path, capsys):
    code, out = sweep(tmp_path)
    assert code == 0
    rows = read_csv(out / "sweep.csv")
    assert len(rows) == 4
    assert {(r["xi"], r["protocol"]) for r in rows} == {
        ("0.01", "tdma"), ("0.01", "wur-bs"), ("0.1", "tdma"), ("0.1", "wur-bs")}
    assert len(json.loads((out / "sweep.json").read_text())) == 4
    meta = json.loads((out / "sweep.meta.json").read_text())
    assert meta["command"] == "sweep" and "timestamp" in meta
    assert "protocol" in capsys.readouterr().out


def test_outputs_are_byte_identical_across_runs(tmp_path):
    _, a = sweep(tmp_path, name="a")
    _, b = sweep(tmp_path, name="b")
    for f in ("sweep.csv", "sweep.json"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_seed_flag_changes_results(tmp_path):
    _, a = sweep(tmp_path, "--seed", "1", name="a")
    _, b = sweep(tmp_path, "--seed", "2", name="b")
    assert (a / "sweep.csv").read_bytes() != (b / "sweep.csv").read_bytes()


def test_env_seed_fallback_and_flag_precedence(tmp_path, monkeypatch):
    _, explicit = sweep(tmp_path, "--seed", "7", name="explicit")
    monkeypatch.setenv("WURSIM_SEED", "7")
    _, env = sweep(tmp_path, name="env")
    _, flag = sweep(tmp_path, "--seed", "3", name="flag")
    _, flag3 = sweep(tmp_path, "--seed", "3", name="flag3")
    assert (explicit / "sweep.csv").read_bytes() == (env / "sweep.csv").read_bytes()
    assert (flag / "sweep.csv").read_bytes() == (flag3 / "sweep.csv").read_bytes()
    assert (flag / "sweep.csv").read_bytes() != (env / "sweep.csv").read_bytes()


def test_bad_env_seed(tmp_path, monkeypatch):
    monkeypatch.setenv("WURSIM_SEED", "abc")
    assert sweep(tmp_path)[0] == 2


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": [100], "loads": [0.1], "protocols": "tdma", "reps": 1,
                               "events": 1000, "seed": 4}))
    out = tmp_path / "o"
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(out)]) == 0
    assert len(read_csv(out / "sweep.csv")) == 1
    assert cli.main(["sweep", "--config", str(cfg), "--loads", "0.1,0.2", "--out", str(out)]) == 0
    rows = read_csv(out / "sweep.csv")
    assert [r["xi"] for r in rows] == ["0.1", "0.2"]
    assert {r["replications"] for r in rows} == {"1"}


@pytest.mark.parametrize("content", ['{"bogus": 1}', "[1, 2]", "{not json", '{"t_p": "fast"}'])
def test_bad_config_is_bad_input(tmp_path, content):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(content)
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_missing_config_is_io_error(tmp_path):
    assert cli.main(["sweep", "--config", str(tmp_path / "nope.json")]) == 3


@pytest.mark.parametrize("argv", [
    ["sweep", "--loads", "1.5"],
    ["sweep", "--loads", "0.1,x"],
    ["sweep", "--protocols", "csma"],
    ["sweep", "--reps", "0"],
    ["bounds", "--g", "1"],
    ["validate", "--checks", "nonsense"],
    ["fixed-group", "--n", "100", "--sizes", "200"],
])
def test_bad_input_exit_code(tmp_path, argv):
    assert cli.main(argv + ["--out", str(tmp_path)]) == 2


def test_unwritable_output_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["bounds", "--g", "8", "--rounds", "3", "--trials", "200",
                     "--out", str(blocker / "sub")]) == 3


def test_bounds_table(tmp_path):
    out = tmp_path / "b"
    assert cli.main(["bounds", "--g", "16,64", "--rounds", "6", "--trials", "2000", "--out", str(out)]) == 0
    rows = read_csv(out / "bounds.csv")
    assert len(rows) == 2 * 7
    assert rows[0]["round"] == "0" and float(rows[0]["monte_carlo"]) == 0.0


def test_validate_pass_and_fail(tmp_path, capsys, monkeypatch):
    assert cli.main(["validate", "--checks", "group-probs,tdma-closed-form,bound-order"]) == 0
    assert capsys.readouterr().out.count("[PASS]") == 3
    from wursim import experiment
    failing = experiment.CheckResult("always-fails", False, 1.0, 0.0, "none")
    monkeypatch.setitem(experiment.CHECKS, "tdma-closed-form", lambda **kw: failing)
    assert cli.main(["validate", "--checks", "tdma-closed-form"]) == 1
    assert "failed: always-fails" in capsys.readouterr().out


def test_fixed_group_delta_rows(tmp_path):
    out = tmp_path / "f"
    code = cli.main(["fixed-group", "--n", "1000", "--sizes", "1,100,500,1000", "--loads", "0.1,0.5",
                     "--reps", "1", "--events", "300", "--out", str(out)])
    assert code == 0
    deltas = read_csv(out / "fixed_group_delta.csv")
    assert len(deltas) == 8
    assert len(read_csv(out / "fixed_group.csv")) == 16
    for d in deltas:
        if d["group_size"] == "1":
            # both schemes reduce to unicast polling; only seed noise separates them
            assert abs(float(d["delta_delay"])) < 3 * float(d["delay_stderr"])


def test_module_entry_point(tmp_path):
    env = dict(os.environ, PYTHONHASHSEED="1")
    res = subprocess.run([sys.executable, "-m", "wursim", "bounds", "--g", "8", "--rounds", "2",
                          "--trials", "100", "--out", str(tmp_path)], capture_output=True, text=True, env=env)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "bounds.csv").exists()
