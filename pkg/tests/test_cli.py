import json

import numpy as np
import pandas as pd
import pytest

from hpscatter.cli import build_parser, loglog_slope, main
from hpscatter.settings import ENV_KEYS, ENV_PREFIX

PLATE = ["--set", "geometry=plate", "--set", "formulation=efie"]


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch, tmp_path):
    for key in ENV_KEYS:
        monkeypatch.delenv(ENV_PREFIX + key.upper(), raising=False)
    monkeypatch.chdir(tmp_path)


def read_report(directory, stem="report"):
    with open(directory / f"{stem}.json", encoding="utf-8") as handle:
        return json.load(handle)


def test_parser_collects_overrides():
    args = build_parser().parse_args(["rcs", "--set", "radius=0.3", "--set", "sweep_step=5", "--verbose"])
    assert args.command == "rcs"
    assert args.overrides == ["radius=0.3", "sweep_step=5"]
    assert args.verbose
    with pytest.raises(SystemExit):
        build_parser().parse_args(["explode"])


def test_loglog_slope():
    assert loglog_slope([1, 2, 4], [1.0, 4.0, 16.0]) == pytest.approx(2.0)
    assert loglog_slope([10], [3.0]) is None
    assert loglog_slope([1, 2], [0.0, 0.0]) is None


def test_single_unknown_plate_solve(tmp_path):
    out = tmp_path / "out"
    code = main(["solve", *PLATE, "--set", "divisions=1", "--output-dir", str(out)])
    assert code == 0
    currents = pd.read_csv(out / "currents.csv")
    assert len(currents) == 1
    assert list(currents.columns) == ["index", "edge", "real", "imag"]
    report = read_report(out)
    assert report["n_unknowns"] == 1
    assert report["series_status"] == "converged"
    assert report["series_max_ratio"] == 0.0
    assert (out / "report.txt").read_text(encoding="utf-8").startswith("geometry = plate")


def test_mfie_on_a_plate_is_a_configuration_error(tmp_path):
    code = main(["solve", "--set", "geometry=plate", "--set", "formulation=mfie", "--output-dir", str(tmp_path)])
    assert code == 2
    assert not (tmp_path / "currents.csv").exists()


def test_unknown_key_is_a_configuration_error(tmp_path):
    assert main(["solve", "--set", "colour=blue", "--output-dir", str(tmp_path)]) == 2


def test_mesh_info(capsys):
    assert main(["mesh-info", *PLATE, "--set", "divisions=2"]) == 0
    printed = capsys.readouterr().out
    assert "unknowns (N)" in printed
    assert "open" in printed


def test_validate_against_dense_solve(tmp_path):
    out = tmp_path / "out"
    args = ["validate", *PLATE, "--set", "divisions=2", "--set", "leaf_factor=2", "--set", "leaf_factors=1.5"]
    assert main(args + ["--output-dir", str(out)]) == 0
    report = read_report(out)
    assert report["solution_error"] <= 1e-8
    assert report["aca_block_error_max"] == 0.0
    assert len(pd.read_csv(out / "validate.csv")) == 2


def test_validate_respects_the_dense_cap(tmp_path):
    args = ["validate", *PLATE, "--set", "divisions=2", "--set", "dense_cap=3"]
    assert main(args + ["--output-dir", str(tmp_path)]) == 2


def test_bistatic_sphere_rcs_with_mie_overlay(tmp_path):
    out = tmp_path / "out"
    args = [
        "rcs",
        "--set", "radius=0.5",
        "--set", "frequency=100e6",
        "--set", "leaf_factor=1.0",
        "--set", "sweep_step=45",
    ]
    assert main(args + ["--output-dir", str(out)]) == 0
    curve = pd.read_csv(out / "rcs.csv")
    mie = pd.read_csv(out / "rcs_mie.csv")
    assert len(curve) == len(mie) == 5
    assert np.allclose(curve["angle_deg"], [0, 45, 90, 135, 180])
    assert np.all(np.isfinite(curve["rcs_dbsm"]))
    report = read_report(out)
    assert report["n_unknowns"] == 120
    assert report["setup_count"] == 1
    assert "mie_mean_abs_db" in report


def test_monostatic_plate_rcs_against_gmres(tmp_path):
    out = tmp_path / "out"
    args = [
        "rcs",
        *PLATE,
        "--set", "divisions=2",
        "--set", "leaf_factor=2",
        "--set", "sweep_mode=monostatic",
        "--set", "sweep_stop=90",
        "--set", "sweep_step=45",
        "--set", "compare_gmres=true",
    ]
    assert main(args + ["--output-dir", str(out)]) == 0
    assert len(pd.read_csv(out / "rcs_gmres.csv")) == 3
    report = read_report(out)
    assert report["gmres_max_abs_db"] < 0.1
    assert report["gmres_iterations_max"] >= 1
    assert report["setup_count"] == 1
    assert "po_broadside_dbsm" in report


def test_plate_size_sweep(tmp_path, capsys):
    out = tmp_path / "out"
    args = ["sweep", *PLATE, "--set", "sweep_sizes=1,2"]
    assert main(args + ["--output-dir", str(out)]) == 0
    frame = pd.read_csv(out / "sweep.csv")
    assert frame["size"].tolist() == [1, 2]
    assert frame["n_unknowns"].tolist()[0] == 1
    assert frame["n_unknowns"].tolist()[1] > 1
    report = read_report(out, "sweep_report")
    assert report["points"] == 2
    assert "setup_s" in capsys.readouterr().out


def test_repeated_runs_write_identical_files(tmp_path):
    args = [
        "rcs",
        "--set", "radius=0.5",
        "--set", "frequency=100e6",
        "--set", "leaf_factor=0.2",
        "--set", "sweep_step=30",
        "--set", "workers=2",
        "--set", "seed=5",
    ]
    first, second = tmp_path / "first", tmp_path / "second"
    assert main(args + ["--output-dir", str(first)]) == 0
    assert main(args + ["--output-dir", str(second)]) == 0
    for name in ("currents.csv", "rcs.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes()
