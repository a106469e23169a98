import json
import subprocess
import sys

import pytest

from eitfactor.cli import main
from eitfactor.facto import ReconstructionReport, read_vtk
from eitfactor.fem import DataMatrix
from eitfactor.fixtures import cylinder_mesh
from eitfactor.mesh import write_mesh


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    write_mesh(cylinder_mesh([(8, 3.5)], 6, 0.5, h_max=1.5), d / "data.msh")
    write_mesh(cylinder_mesh([(8, 3.5)], 4, 1.0, h_max=2.5), d / "recon.msh")
    return d


def _config(workdir, name, **extra):
    cfg = {
        "name": name,
        "data_mesh": "data.msh",
        "recon_mesh": "recon.msh",
        "electrode_tags": list(range(101, 109)),
        "background": {"1": 1.0},
        "inclusions": [{"center": [0.0, 4.0, 3.5], "radius": 2.0, "value": 3.0}],
        "patterns": {"kind": "opposite_ring"},
        "noise": {"delta": 0.01, "seed": 3},
        "grid": {"shape": [10, 10, 5]},
    }
    cfg.update(extra)
    path = workdir / f"{name}.json"
    path.write_text(json.dumps(cfg))
    return path


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_simulate_reconstruct_evaluate(workdir, capsys):
    cfg = _config(workdir, "ok")
    out = workdir / "out_ok"
    code, stdout, _ = _run(capsys, "simulate", "--config", cfg, "--out", out)
    assert code == 0 and "8x4" in stdout
    diff = DataMatrix.load(out / "diff.json")
    assert diff.shape == (8, 4) and diff.provenance["role"] == "diff"
    for name in ("ref.json", "meas.json"):
        assert (out / name).is_file()

    code, stdout, _ = _run(capsys, "reconstruct", "--config", cfg, "--out", out)
    assert code == 0 and "component" in stdout
    rep = ReconstructionReport.load(out / "report.json")
    assert rep.components and rep.errors["full"]["mean"] is not None
    assert rep.config["config"]["name"] == "ok"
    vals, _, _ = read_vtk(out / "indicator.vtk")
    assert vals.shape == (10, 10, 5) and vals.max() == 1.0

    before = (out / "report.json").read_bytes()
    code, stdout, _ = _run(capsys, "evaluate", "--config", cfg, "--out", out, "--report", out / "report.json")
    assert code == 0
    assert (out / "report.json").read_bytes() == before
    assert stdout.splitlines()[0].split()[:3] == ["label", "mode", "iso"]
    rows = json.loads((out / "metrics.json").read_text())
    assert len(rows) == 1 and rows[0]["E_c"] == pytest.approx(rep.errors["full"]["mean"])
    assert (out / "metrics.txt").read_text() == stdout


def test_outputs_are_deterministic(workdir, capsys):
    cfg = _config(workdir, "det")
    blobs = []
    for k in range(2):
        out = workdir / f"det_{k}"
        assert _run(capsys, "simulate", "--config", cfg, "--out", out, "--seed", 17)[0] == 0
        assert _run(capsys, "reconstruct", "--config", cfg, "--out", out, "--seed", 17)[0] == 0
        blobs.append([(out / n).read_bytes() for n in ("diff.json", "report.json", "indicator.vtk")])
    assert blobs[0] == blobs[1]


def test_clean_data_flagged(workdir, capsys):
    cfg = _config(workdir, "clean")
    out = workdir / "clean"
    assert _run(capsys, "simulate", "--config", cfg, "--out", out, "--delta", 0)[0] == 0
    assert DataMatrix.load(out / "diff.json").provenance["kind"] == "clean"


def test_single_point_grid_is_degenerate(workdir, capsys):
    cfg = _config(workdir, "one", grid={"shape": [1, 1, 1]})
    out = workdir / "one"
    assert _run(capsys, "simulate", "--config", cfg, "--out", out)[0] == 0
    code, stdout, _ = _run(capsys, "reconstruct", "--config", cfg, "--out", out)
    assert code == 0 and "degenerate" in stdout
    rep = ReconstructionReport.load(out / "report.json")
    assert rep.degenerate and rep.empty


def _error(err):
    return json.loads(err.strip().splitlines()[-1])


def test_missing_mesh_exit_2(workdir, capsys):
    cfg = _config(workdir, "nomesh", data_mesh="missing.msh")
    code, _, err = _run(capsys, "simulate", "--config", cfg)
    assert code == 2
    e = _error(err)
    assert e["exit_code"] == 2 and e["command"] == "simulate" and "missing.msh" in e["message"]


def test_bad_config_exit_2(workdir, capsys):
    p = workdir / "broken.json"
    p.write_text("{ not json")
    code, _, err = _run(capsys, "reconstruct", "--config", p)
    assert code == 2 and _error(err)["error"] == "FormatError"
    code, _, err = _run(capsys, "simulate", "--config", _config(workdir, "iso"), "--iso", 1.5)
    assert code == 2


def test_reconstruct_without_data_exit_2(workdir, capsys):
    cfg = _config(workdir, "nodata")
    code, _, err = _run(capsys, "reconstruct", "--config", cfg, "--out", workdir / "empty")
    assert code == 2 and "simulate first" in _error(err)["message"]


def test_evaluate_without_reports_exit_2(workdir, capsys):
    cfg = _config(workdir, "noreports")
    code, _, err = _run(capsys, "evaluate", "--config", cfg, "--out", workdir / "nothing")
    assert code == 2 and _error(err)["error"] == "ConfigError"


def test_zero_data_exit_3(workdir, capsys):
    cfg = _config(workdir, "zero", inclusions=[], noise={"delta": 0.0})
    out = workdir / "zero"
    assert _run(capsys, "simulate", "--config", cfg, "--out", out)[0] == 0
    code, _, err = _run(capsys, "reconstruct", "--config", cfg, "--out", out)
    assert code == 3 and _error(err)["error"] == "DegenerateError"


def test_layout_mismatch_exit_4(workdir, capsys):
    cfg = _config(workdir, "mismatch")
    out = workdir / "mismatch"
    assert _run(capsys, "simulate", "--config", cfg, "--out", out)[0] == 0
    d = json.loads((out / "diff.json").read_text())
    d["fingerprint"] = "0" * 16
    (out / "other.json").write_text(json.dumps(d))
    code, _, err = _run(capsys, "reconstruct", "--config", cfg, "--out", out, "--data", out / "other.json")
    assert code == 4 and _error(err)["error"] == "IncompatibilityError"


def test_inverse_crime_flag(workdir, capsys):
    cfg = _config(workdir, "crime", recon_mesh="data.msh")
    assert _run(capsys, "simulate", "--config", cfg, "--out", workdir / "crime")[0] == 2
    assert _run(capsys, "simulate", "--config", cfg, "--out", workdir / "crime", "--allow-inverse-crime")[0] == 0


def test_console_script(workdir):
    cfg = _config(workdir, "script")
    res = subprocess.run([sys.executable, "-m", "eitfactor.cli", "simulate", "--config", str(cfg), "--out",
                          str(workdir / "script")], capture_output=True, text=True,
                         env={"EITFACTOR_THREADS": "1", "PATH": ""})
    assert res.returncode == 0, res.stderr
    res = subprocess.run([sys.executable, "-m", "eitfactor.cli", "bogus"], capture_output=True, text=True)
    assert res.returncode == 2
