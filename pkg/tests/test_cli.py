import json

import numpy as np
import pytest

from plaplace.cli import EXIT_CONFIG, EXIT_OK, EXIT_PROPERTY, main, parse_config
from plaplace.errors import ConfigError


def _run(capsys, *argv):
    code = main(list(argv))
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def test_solve_linear_current(tmp_path, capsys):
    code, out, _ = _run(capsys, "solve", "--p", "2", "--tau", "0", "--current", "cos1", "--out", str(tmp_path))
    assert code == EXIT_OK
    info = json.loads(out)
    assert info["coefficient"] == pytest.approx(1.0, abs=1e-2)
    assert info["newton_steps"] == 1
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "solve" and manifest["settings"]["p"] == [2.0]
    assert (tmp_path / "trace_coefficients.csv").exists()


def test_replay_from_manifest(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    code, out_a, _ = _run(capsys, "solve", "--p", "2.5", "--sample", "A", "--seed", "3", "--current", "sin2",
                          "--out", str(a))
    assert code == EXIT_OK
    code, out_b, _ = _run(capsys, "solve", "--config", str(a / "run.cfg"), "--out", str(b))
    assert code == EXIT_OK
    assert json.loads(out_a) == json.loads(out_b)
    assert (a / "solution.txt").read_text() == (b / "solution.txt").read_text()


def test_config_errors_name_line_and_field(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("# comment\np = 2.5\nfrobnicate = 3\n")
    code, _, err = _run(capsys, "solve", "--config", str(cfg), "--out", str(tmp_path))
    assert code == EXIT_CONFIG
    e = json.loads(err)
    assert e["error"] == "config" and ":3:" in e["message"] and "frobnicate" in e["message"]
    cfg.write_text("p = two\n")
    code, _, err = _run(capsys, "solve", "--config", str(cfg), "--out", str(tmp_path))
    assert code == EXIT_CONFIG and ":1:" in json.loads(err)["message"]
    cfg.write_text("just words\n")
    with pytest.raises(ConfigError):
        parse_config(cfg)


@pytest.mark.parametrize(
    "argv",
    [
        ["solve", "--p", "0.5"],
        ["solve", "--tau", "-1"],
        ["solve", "--param", "log"],
        ["solve", "--sample", "Z"],
        ["solve", "--current", "tan3"],
        ["sweep", "--samples", "5"],
        ["mesh-build", "--mesh-n", "10"],
    ],
)
def test_invalid_values_exit_2(tmp_path, capsys, argv):
    code, _, err = _run(capsys, *argv, "--out", str(tmp_path))
    assert code == EXIT_CONFIG
    assert json.loads(err)["error"] == "config"


def test_proptest_small(tmp_path, capsys):
    code, out, _ = _run(capsys, "proptest", "--samples", "2000", "--out", str(tmp_path))
    assert code == EXIT_OK
    assert json.loads((tmp_path / "manifest.json").read_text())["ok"] is True


def test_proptest_failure_exit_4(tmp_path, capsys, monkeypatch):
    import plaplace.cli as cli

    real = cli.calibrate_constants
    monkeypatch.setattr(cli, "calibrate_constants", lambda *a, **k: (lambda e, t: (e, 0.3 * t))(*real(*a, **k)))
    code, _, err = _run(capsys, "proptest", "--samples", "3000", "--out", str(tmp_path))
    assert code == EXIT_PROPERTY
    assert json.loads(err)["error"] == "property"


def test_mesh_build_and_sample(tmp_path, capsys):
    code, out, _ = _run(capsys, "mesh-build", "--mesh-n", "64", "--cells", "60", "--seed", "1", "--out", str(tmp_path))
    assert code == EXIT_OK
    assert (tmp_path / "mesh.txt").exists() and (tmp_path / "mesh_perturbed.txt").exists()
    code, out, _ = _run(capsys, "sample", "--mesh-n", "64", "--cells", "60", "--sample", "E,F", "--members", "5",
                        "--out", str(tmp_path))
    assert code == EXIT_OK
    assert set(json.loads(out)) == {"E", "F"}
    rows = (tmp_path / "sample_E.csv").read_text().splitlines()
    assert rows[0].startswith("# varsigma2=0.01") and len(rows) == 2 + 5


def test_jacobian_linerr_invert(tmp_path, capsys):
    common = ["--mesh-n", "64", "--cells", "60", "--p", "2", "--out"]
    code, out, _ = _run(capsys, "jacobian", *common, str(tmp_path / "j"))
    assert code == EXIT_OK and json.loads(out)["shape"] == [256, json.loads(out)["shape"][1]]
    code, out, _ = _run(capsys, "linerr", *common, str(tmp_path / "l"), "--sample", "E", "--members", "2")
    assert code == EXIT_OK
    es = [json.loads(line)["e"] for line in out.splitlines()]
    assert len(es) == 4 and all(0 <= e < 0.1 for e in es)
    code, out, _ = _run(capsys, "invert", *common, str(tmp_path / "i"), "--sample", "E", "--members", "2",
                        "--lambda", "1e-3")
    assert code == EXIT_OK
    assert 0 < json.loads(out)["iota"] < 0.174


def test_sweep_command(tmp_path, capsys):
    cfg = tmp_path / "desk.cfg"
    cfg.write_text(
        "study = both\nsample = E\np = 1.75, 2.0\ntau = 0\nmembers = 2\nmesh_n = 64\ncells = 60\n"
        "misspecified = yes\nsnapshots = 1\n"
    )
    code, out, _ = _run(capsys, "sweep", "--config", str(cfg), "--out", str(tmp_path / "s"))
    assert code == EXIT_OK
    files = json.loads(out)["files"]
    assert any(f.endswith("recon.csv") for f in files) and any(f.endswith("linerr.csv") for f in files)
    recon = (tmp_path / "s" / "recon.csv").read_text()
    assert ",p2," in recon and recon.startswith("# schema=plaplace-recon")
    iota = [float(line.split(",")[6]) for line in recon.splitlines()[2:]]
    assert np.all(np.isfinite(iota))
