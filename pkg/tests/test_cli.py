"""Command-line front end: exit codes, outputs, reproducibility."""

import csv
import json
import logging

from grbsde_lab import cli


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def write_config(tmp_path, **problem):
    cfg = {
        "name": "bad_corridor",
        "mesh": {"T": 1.0, "n_steps": 4},
        "ensemble": {"n_paths": 32},
        "problem": {"driver": 0.0, "terminal": 0.5, **problem},
        "solver": {"scheme": "two_barriers"},
        "checks": [{"name": "singularity", "tolerance": 0.0}],
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_run_bundled_scenario(tmp_path, capsys):
    code, out, _ = run(["run", "colehopf_gauss", "--out-dir", str(tmp_path)], capsys)
    assert code == 0
    report = json.loads((tmp_path / "colehopf_gauss_report.json").read_text())
    err = next(c for c in report["checks"] if c["name"] == "oracle_path_error")
    assert err["passed"] and err["value"] <= err["tolerance"]
    assert "PASS oracle_path_error" in out


def test_panel_csv_format(tmp_path, capsys):
    run(["run", "reflected_constant", "--out-dir", str(tmp_path)], capsys)
    raw = (tmp_path / "reflected_constant_panel.csv").read_bytes()
    assert b"\r" not in raw
    rows = list(csv.reader(raw.decode().splitlines()))
    assert rows[0] == ["t", "path", "Y", "Z_1", "dK_plus", "dK_minus"]
    assert rows[1][4] == "0.050000000000000003"  # 17 significant digits
    last = rows[-1]
    assert last[0] == "1" and last[3:] == ["", "", ""]
    assert len(rows) == 1 + 21 * 16


def test_crossing_barriers_exit_2_and_name_the_invariant(tmp_path, capsys):
    cfg = write_config(tmp_path, lower=1.0, upper=0.0)
    code, out, err = run(["run", str(cfg), "--out-dir", str(tmp_path / "o")], capsys)
    assert code == 2
    assert "L <= U" in err and "node" in err
    assert not (tmp_path / "o").exists()


def test_malformed_json_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code, _, err = run(["run", str(bad)], capsys)
    assert code == 2 and "configuration error" in err


def test_missing_config_exit_2(tmp_path, capsys):
    code, _, _ = run(["run", str(tmp_path / "absent.json")], capsys)
    assert code == 2


def test_failing_check_exit_1_with_report(tmp_path, capsys):
    cfg = json.loads(write_config(tmp_path, lower=0.0, upper=1.0).read_text())
    cfg["checks"] = [{"name": "skorokhod", "tolerance": -1.0}]
    path = tmp_path / "fail.json"
    path.write_text(json.dumps(cfg))
    code, out, _ = run(["run", str(path), "--out-dir", str(tmp_path)], capsys)
    assert code == 1
    assert "FAIL skorokhod" in out
    assert json.loads((tmp_path / "bad_corridor_report.json").read_text())["passed"] is False


def test_dry_run_writes_nothing(tmp_path, capsys):
    out_dir = tmp_path / "out"
    code, out, _ = run(["--dry-run", "--out-dir", str(out_dir), "run", "tree_abs"], capsys)
    assert code == 0
    assert json.loads(out)["name"] == "tree_abs"
    assert not out_dir.exists()
    code, _, _ = run(["converge", "deterministic_ode", "--dry-run", "--out-dir", str(out_dir)], capsys)
    assert code == 0 and not out_dir.exists()


def test_seed_override_before_and_after_subcommand(tmp_path, capsys):
    _, out_a, _ = run(["--seed", "5", "run", "tree_abs", "--dry-run"], capsys)
    _, out_b, _ = run(["run", "tree_abs", "--dry-run", "--seed", "5"], capsys)
    assert json.loads(out_a)["ensemble"]["seed"] == 5
    assert json.loads(out_b)["ensemble"]["seed"] == 5


def test_rerun_is_bitwise_reproducible(tmp_path, capsys):
    for sub in ("a", "b"):
        run(["run", "tree_put", "--out-dir", str(tmp_path / sub)], capsys)
    assert (tmp_path / "a" / "tree_put_panel.csv").read_bytes() == (tmp_path / "b" / "tree_put_panel.csv").read_bytes()
    run(["run", "tree_put", "--out-dir", str(tmp_path / "c"), "--seed", "1"], capsys)
    assert (tmp_path / "a" / "tree_put_panel.csv").read_bytes() != (tmp_path / "c" / "tree_put_panel.csv").read_bytes()


def test_threads_do_not_change_results(tmp_path, capsys):
    run(["run", "tree_abs", "--out-dir", str(tmp_path / "one")], capsys)
    run(["run", "tree_abs", "--out-dir", str(tmp_path / "two"), "--threads", "2"], capsys)
    assert (tmp_path / "one" / "tree_abs_panel.csv").read_bytes() == (tmp_path / "two" / "tree_abs_panel.csv").read_bytes()


def test_bad_threads_exit_2(capsys):
    assert run(["run", "tree_abs", "--threads", "0"], capsys)[0] == 2


def test_converge_table(tmp_path, capsys):
    code, out, _ = run(["converge", "deterministic_ode", "--steps", "10,20,40,80", "--out-dir", str(tmp_path)], capsys)
    assert code == 0
    rows = list(csv.reader((tmp_path / "deterministic_ode_convergence.csv").read_text().splitlines()))
    assert rows[0] == ["n_steps", "Y0_error", "skorokhod_residual", "runtime_s"]
    errors = [float(r[1]) for r in rows[1:]]
    assert all(1.5 <= a / b <= 3.0 for a, b in zip(errors, errors[1:]))
    assert "PASS monotone error decay" in out


def test_converge_exact_scenario_at_floor(tmp_path, capsys):
    cfg = write_config(tmp_path, lower=0.0, upper=1.0)
    code, _, _ = run(["converge", str(cfg), "--steps", "4,8", "--out-dir", str(tmp_path)], capsys)
    assert code == 2  # no oracle to converge against
    code, _, _ = run(["converge", "reflected_constant", "--steps", "5,10,20", "--out-dir", str(tmp_path)], capsys)
    assert code == 0
    rows = list(csv.reader((tmp_path / "reflected_constant_convergence.csv").read_text().splitlines()))
    assert all(float(r[1]) <= 1e-12 for r in rows[1:])


def test_converge_tree_scenario_error_column(tmp_path, capsys):
    code, _, _ = run(["converge", "tree_abs", "--steps", "4,8,16", "--out-dir", str(tmp_path)], capsys)
    rows = list(csv.reader((tmp_path / "tree_abs_convergence.csv").read_text().splitlines()))
    assert len(rows) == 4 and code in (0, 1)


def test_bad_steps_exit_2(capsys):
    assert run(["converge", "deterministic_ode", "--steps", "10,x"], capsys)[0] == 2


def test_list(capsys):
    code, out, _ = run(["list"], capsys)
    lines = out.strip().splitlines()
    assert code == 0 and len(lines) >= 8
    names = {line.split("\t")[0] for line in lines}
    assert {"bounded_loglog", "unbounded_linear_psi1", "colehopf_gauss"} <= names


def test_no_color_respected(monkeypatch):
    monkeypatch.setenv("NO_COLOR", "1")
    cli._setup_logging(False)
    fmt = logging.getLogger("grbsde_lab").handlers[0].formatter._fmt
    assert "\033" not in fmt
