import json

import numpy as np
import pytest

from rmtqubit import cli
from rmtqubit.dynamics import Ensemble, ModelParams
from rmtqubit.io import (
    TrajectoryFormatError, read_sweep, validate_trajectory_file, write_criteria, write_trajectory,
)
from rmtqubit.nm_measures import MeasureConfig, analyze
from rmtqubit.sweep import RunSettings, point_stem, run_point


@pytest.fixture(scope="module")
def traj():
    return Ensemble.uniform(ModelParams(0.6, 0.3, 8, 5, master_seed=2), dt=0.1).trajectory()


@pytest.fixture
def traj_file(tmp_path, traj):
    return write_trajectory(tmp_path / "traj.csv", traj)


def test_roundtrip_is_bitwise(traj, traj_file):
    back = validate_trajectory_file(traj_file)
    for name in ("t", "r", "z1", "z2", "se_r", "se_z1", "se_z2"):
        assert np.array_equal(getattr(back, name), getattr(traj, name))
    assert back.n_accumulated == traj.n_accumulated
    assert (back.params.delta, back.params.lam, back.params.env_dim, back.params.master_seed) == (0.6, 0.3, 8, 2)


def test_header_format(traj_file):
    lines = traj_file.read_text().splitlines()
    assert lines[0] == "# delta=0.6 lambda=0.3 N=8 N_sam=5 seed=2"
    assert lines[1] == "t,r,re_z1,im_z1,re_z2,im_z2,se_r,se_re_z1,se_im_z1,se_re_z2,se_im_z2"


def _tamper(path, lineno, column, value):
    lines = path.read_text().splitlines()
    parts = lines[lineno - 1].split(",")
    parts[column] = value
    lines[lineno - 1] = ",".join(parts)
    path.write_text("\n".join(lines) + "\n")


def test_tampered_initial_row(traj_file):
    _tamper(traj_file, 3, 1, "0.5")
    with pytest.raises(TrajectoryFormatError, match="line 3"):
        validate_trajectory_file(traj_file)


def test_non_monotone_time(traj_file):
    _tamper(traj_file, 10, 0, "0.05")
    with pytest.raises(TrajectoryFormatError, match="line 10"):
        validate_trajectory_file(traj_file)


@pytest.mark.parametrize("line, text", [
    (1, "# delta=0.6 lambda=0.3 N=8 seed=2"),
    (1, "delta=0.6"),
    (2, "t,r,z1"),
    (5, "0.3,1,2"),
    (6, "0.4,x,0,0,0,0,0,0,0,0,0"),
])
def test_malformed_lines(traj_file, line, text):
    lines = traj_file.read_text().splitlines()
    lines[line - 1] = text
    traj_file.write_text("\n".join(lines) + "\n")
    with pytest.raises(TrajectoryFormatError, match=f"line {line}"):
        validate_trajectory_file(traj_file)


def test_criteria_file(tmp_path, traj):
    a = analyze(traj, MeasureConfig(n_theta=5, n_phi=5))
    path = write_criteria(tmp_path / "c.csv", a.criteria_table(), "blp_R=2")
    lines = path.read_text().splitlines()
    assert lines[1] == "t,delta1,delta2,deltaq,g,delta1C,delta2C,sigma_max,valid"
    assert len(lines) == 2 + len(a.trajectory)


# command line

POINT = ["--delta", "0.1", "--lambda", "0.03125", "--env-dim", "64", "--n-samples", "16", "--seed", "7"]


@pytest.fixture(scope="module")
def point_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("point")
    assert cli.main(["point", *POINT, "--output", str(out)]) == 0
    return out


def test_point_writes_files(point_dir):
    stem = point_stem(ModelParams(0.1, 0.03125, 64, 16, master_seed=7))
    assert (point_dir / f"traj_{stem}.csv").exists()
    report = json.loads((point_dir / f"report_{stem}.json").read_text())
    assert report["provenance"]["blp_R"] == 2.0
    assert report["nm_blp"] > 0


def test_measures_reproduce_point_report(point_dir, tmp_path):
    stem = point_stem(ModelParams(0.1, 0.03125, 64, 16, master_seed=7))
    out = tmp_path / "m.json"
    assert cli.main(["measures", "--traj", str(point_dir / f"traj_{stem}.csv"), "--output", str(out)]) == 0
    a = json.loads(out.read_text())
    b = json.loads((point_dir / f"report_{stem}.json").read_text())
    a.pop("provenance"), b.pop("provenance")
    assert a == b
    _, rep = run_point(ModelParams(0.1, 0.03125, 64, 16, master_seed=7), RunSettings())
    assert a == json.loads(json.dumps(rep.to_dict()))


def test_criteria_shows_positive_excursions(point_dir, tmp_path):
    stem = point_stem(ModelParams(0.1, 0.03125, 64, 16, master_seed=7))
    out = tmp_path / "crit.csv"
    assert cli.main(["criteria", "--traj", str(point_dir / f"traj_{stem}.csv"), "-o", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert "blp_R=2" in lines[0]
    g = np.array([float(l.split(",")[4]) for l in lines[2:]])
    assert np.nanmax(g) > 0 and np.mean(np.nan_to_num(g) > 0) > 0.05


def test_measures_on_unitary_trajectory(tmp_path, capsys):
    tr = Ensemble.uniform(ModelParams(0.5, 0.0, 6, 2, master_seed=1), dt=0.1).trajectory()
    path = write_trajectory(tmp_path / "u.csv", tr)
    assert cli.main(["measures", "--traj", str(path)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["nm_rhp"] < 1e-10 and rep["nm_blp"] < 1e-10 and rep["nm_mdr"] < 1e-10
    assert cli.main(["endtime", "--traj", str(path)]) == 2


def test_endtime(traj, traj_file, capsys):
    assert cli.main(["endtime", "--traj", str(traj_file)]) == 0
    t_end = float(capsys.readouterr().out)
    assert 0 < t_end < traj.t[-1]
    assert traj.purity_y()[np.searchsorted(traj.t, t_end)] <= 0.51


def test_user_errors(tmp_path, traj_file, capsys):
    assert cli.main(["explode"]) == 1
    assert cli.main(["point", "--config", str(tmp_path / "nope.cfg")]) == 1
    assert cli.main(["point", "--set", "nonsense=1", *POINT]) == 1
    assert cli.main(["point", "--set", "env_dim"]) == 1
    assert cli.main(["measures"]) == 1
    _tamper(traj_file, 7, 0, "-1")
    assert cli.main(["measures", "--traj", str(traj_file)]) == 1
    assert "line 7" in capsys.readouterr().err
    assert cli.main(["point", "--lambda", "0.1"]) == 1


def test_config_from_environment(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "env.cfg"
    cfg.write_text("delta=0.7\nlambda=0.4\nenv_dim=6\nn_samples=3\nseed=1\nn_theta=5\nn_phi=5\nmin_points=50\n")
    monkeypatch.setenv(cli.CONFIG_ENV, str(cfg))
    assert cli.main(["point", "--output", str(tmp_path), "--blp-R", "1"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["blp_R"] == 1.0 and rep["env_dim"] == 6
    monkeypatch.setenv(cli.CONFIG_ENV, str(tmp_path / "missing.cfg"))
    assert cli.main(["point"]) == 1


def test_converge_and_sweep_verbs(tmp_path):
    out = tmp_path / "conv.csv"
    args = ["--delta", "0.7", "--lambda", "0.4", "--env-dim", "6", "--n-samples", "8",
            "--set", "n_theta=5", "--set", "n_phi=5", "--set", "min_points=50"]
    assert cli.main(["converge", *args, "--prefixes", "2,4,8", "-o", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[1].startswith("n_samples,") and len(rows) == 5
    assert cli.main(["converge", *args, "--prefixes", "4,16"]) == 1
    sweep_dir = tmp_path / "sw"
    code = cli.main(["sweep", "--output", str(sweep_dir), "--threads", "2",
                     "--set", "delta_count=2", "--set", "lambda_count=1", "--set", "lambda_min=0.4",
                     "--set", "lambda_max=0.4", "--set", "env_dim=6", "--set", "n_samples=3",
                     "--set", "n_theta=5", "--set", "n_phi=5", "--set", "min_points=50",
                     "--set", "delta_min=1", "--set", "delta_max=2"])
    assert code == 0
    assert len(read_sweep(sweep_dir / "sweep.csv")) == 2
