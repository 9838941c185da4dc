import csv
import io
import re
import shutil
import subprocess

import pytest

from dsgd import cli
from dsgd.mesh import MeshFamilySpec, generate, save


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def rows_of(text):
    body = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(io.StringIO("\n".join(body))))


def test_converge_rows_and_slopes(capsys):
    code, out, _ = run(["converge", "--family", "triangular", "--n", "0..2", "--k", "0..4",
                        "--p", "2", "--case", "trig", "--stab", "rtn"], capsys)
    assert code == 0
    rows = rows_of(out)
    assert len(rows) == 15
    assert list(rows[0]) == cli.COLUMNS
    slopes = re.findall(r"^# slope k=(\d): (-?[\d.]+)$", out, re.M)
    assert [int(k) for k, _ in slopes] == [0, 1, 2, 3, 4]
    assert all(int(r["newton_iters"]) == 1 for r in rows)


def test_run_with_mesh_file(tmp_path, capsys):
    path = tmp_path / "tri.polymesh"
    save(generate(MeshFamilySpec("triangular", 1)), path)
    code, out, _ = run(["run", "--mesh", str(path), "--k", "1", "--p", "4", "--case", "trig",
                        "--stab", "rtn"], capsys)
    assert code == 0
    rows = rows_of(out)
    assert len(rows) == 1
    assert rows[0]["family"] == "tri" and int(rows[0]["newton_iters"]) >= 1
    assert float(rows[0]["p"]) == 4


def test_fraction_exponent_and_output_file(tmp_path, capsys):
    out_path = tmp_path / "sub" / "exp.csv"
    code, out, _ = run(["run", "--family", "cartesian", "--n", "1", "--k", "0", "--p", "7/4",
                        "--case", "exp", "--output", str(out_path)], capsys)
    assert code == 0 and out == ""
    rows = rows_of(out_path.read_text())
    assert rows[0]["p"] == "1.75" and float(rows[0]["err_grad"]) > 0


@pytest.mark.parametrize("argv", [
    ["run", "--family", "triangular", "--n", "0..2", "--k", "1"],
    ["run", "--family", "triangular", "--k", "1..x"],
    ["run", "--family", "triangular", "--p", "1"],
    ["run", "--family", "triangular", "--p", "abc"],
    ["run", "--family", "nope"],
    ["run", "--k", "0"],
    ["run", "--family", "triangular", "--mesh", "x.polymesh"],
    ["run", "--family", "triangular", "--k", "1", "--stab", "hmm"],
    ["run", "--family", "triangular", "--k", "0", "--l-offset", "plus", "--stab", "hmm"],
    ["run", "--mesh", "/nonexistent/file.polymesh", "--k", "0"],
    ["bogus"],
])
def test_config_errors_exit_3(argv, capsys):
    code, _, err = run(argv, capsys)
    assert code == 3
    assert err


def test_solver_failure_exit_2(capsys, caplog):
    code, out, _ = run(["run", "--family", "triangular", "--n", "1", "--k", "1", "--p", "4",
                        "--max-iter", "1"], capsys)
    assert code == 2
    # the partial row is still written
    assert len(rows_of(out)) == 1
    assert any("did not converge" in r.message for r in caplog.records)


def test_verify_prints_pass_lines(capsys):
    code, out, _ = run(["verify", "--family", "hexagonal", "--n", "0", "--k", "0..1"], capsys)
    assert code == 0
    lines = out.strip().splitlines()
    assert lines and all(" PASS " in ln for ln in lines)
    for name in ("commutation", "orthogonality", "constant_field", "stability_lower_bound",
                 "norm_equivalence", "image_degree", "kernel"):
        assert any(name in ln for ln in lines), name
    assert any("[hmm]" in ln for ln in lines)


def test_verify_deterministic(capsys):
    argv = ["verify", "--family", "cartesian", "--n", "0", "--k", "1", "--seed", "5"]
    _, a, _ = run(argv, capsys)
    _, b, _ = run(argv, capsys)
    assert a == b


def test_threads_env_fallback(monkeypatch, capsys):
    monkeypatch.setenv("DSGD_THREADS", "2")
    ns = cli.build_parser().parse_args(["run", "--family", "cartesian"])
    assert cli.RunConfig.from_args(ns).threads == 2
    ns = cli.build_parser().parse_args(["run", "--family", "cartesian", "--threads", "3"])
    assert cli.RunConfig.from_args(ns).threads == 3


@pytest.mark.skipif(shutil.which("dsgd") is None, reason="console script not installed")
def test_console_script():
    out = subprocess.run(["dsgd", "run", "--family", "cartesian", "--n", "0", "--k", "0"],
                         capture_output=True, text=True)
    assert out.returncode == 0
    assert out.stdout.splitlines()[0] == ",".join(cli.COLUMNS)
