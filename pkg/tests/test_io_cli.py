import json
import os

import numpy as np
import pytest

from lagfield import Field, Grid2D, io
from lagfield.cli import field_error, main, sub_seed
from lagfield.density import WAVE_MLP, mlp_density
from lagfield.errors import FormatError
from lagfield.reference import (SchrodingerParams, WaveParams, generate_trajectories,
                                schrodinger_density, wave_density, wave_tw_speed)
from lagfield.rom import fit_pca
from lagfield.tw import WaveProfile

G = Grid2D(4, 6, 0.025, 0.05)


def test_field_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    f = Field(Grid2D(3, 5, 0.01, 0.125), rng.standard_normal((4, 5, 2)))
    io.write_field(tmp_path / "f.csv", f)
    g = io.read_field(tmp_path / "f.csv")
    assert g.grid == f.grid and np.array_equal(g.values, f.values)


def test_format_line_is_checked(tmp_path):
    (tmp_path / "bad.csv").write_text("# format something-else 1\n1,2\n")
    with pytest.raises(FormatError):
        io.read_field(tmp_path / "bad.csv")
    io.write_profile(tmp_path / "p.csv", WaveProfile(1.0, 1.0, [[0, 1j]]))
    with pytest.raises(FormatError):
        io.read_field(tmp_path / "p.csv")


def test_checkpoint_round_trips(tmp_path):
    m = mlp_density(WAVE_MLP, 3, 1, seed=4)
    io.write_checkpoint(tmp_path / "m.json", m)
    m2 = io.read_checkpoint(tmp_path / "m.json")
    assert np.array_equal(m2.theta, m.theta) and m2.spec == m.spec
    x = np.random.default_rng(1).standard_normal((3, 1))
    assert float(m2.fn(m2.theta, x)) == float(m.fn(m.theta, x))
    for model in (wave_density(WaveParams(0.01, 0.1)), schrodinger_density(SchrodingerParams(hbar=2.0))):
        io.write_checkpoint(tmp_path / "a.json", model)
        back = io.read_checkpoint(tmp_path / "a.json")
        assert back.backend == model.backend and back.info == model.info
    (tmp_path / "x.json").write_text("{not json")
    with pytest.raises(FormatError):
        io.read_checkpoint(tmp_path / "x.json")


def test_profile_losses_and_basis_round_trips(tmp_path):
    p = WaveProfile(1.0, 1.0095875441586168, np.array([[0.5, 0.1 - 2j, 3e-17j]]))
    io.write_profile(tmp_path / "p.csv", p)
    q = io.read_profile(tmp_path / "p.csv")
    assert q.c == p.c and np.array_equal(q.coeffs, p.coeffs)
    hist = [(1, 0.5, 1e-7, 0.1), (2, 0.25, 2e-7, 0.2)]
    io.write_losses(tmp_path / "l.csv", hist)
    np.testing.assert_array_equal(io.read_losses(tmp_path / "l.csv")[:, :3], np.array(hist)[:, :3])
    pca = fit_pca(np.random.default_rng(2).standard_normal((6, 9)), 2)
    io.write_basis(tmp_path / "b.csv", pca)
    assert np.array_equal(io.read_basis(tmp_path / "b.csv").basis, pca.basis)


def test_sub_seeds_are_stable_and_distinct():
    assert sub_seed(0, "data") == sub_seed(0, "data")
    assert len({sub_seed(0, "data"), sub_seed(0, "init"), sub_seed(1, "data")}) == 3


def test_field_error_uses_modulus_for_two_components():
    a = np.zeros((2, 3, 2))
    b = a.copy()
    b[1, 2] = [3.0, 4.0]
    assert field_error(a, b) == 5.0


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"theory": "wave", "K": 2,
                                "grid": {"n_t": 6, "n_x": 20, "dt": 0.025, "dx": 0.05},
                                "adam": {"epochs": 2, "batch_size": 20},
                                "tw": {"steps": 20}}))
    return path


def test_gen_data_train_simulate_eval(tmp_path, capsys, config):
    data = tmp_path / "data"
    code, out, _ = _run(capsys, "gen-data", "--config", config, "--seed", 3, "--out", data)
    assert code == 0 and json.loads(out)["tuples"] == 2 * 5 * 20
    assert (data / "config.json").read_text() == config.read_text()
    ref = generate_trajectories(WaveParams(), 2, Grid2D(6, 20, 0.025, 0.05), sub_seed(3, "data"))
    assert np.array_equal(io.read_field(data / "trajectory_001.csv").values, ref[1].values)

    code, out, _ = _run(capsys, "train", "--config", config, "--seed", 1, "--data", data,
                        "--out", tmp_path / "tr")
    assert code == 0 and json.loads(out)["epochs"] == 2
    first = io.read_checkpoint(tmp_path / "tr" / "checkpoint.json").theta
    _run(capsys, "train", "--config", config, "--seed", 1, "--data", data, "--out", tmp_path / "tr2")
    assert np.array_equal(io.read_checkpoint(tmp_path / "tr2" / "checkpoint.json").theta, first)
    code, out, _ = _run(capsys, "train", "--config", config, "--data", data, "--stride", 2,
                        "--out", tmp_path / "tr3")
    assert json.loads(out)["tuples"] == 2 * 3 * 20

    io.write_checkpoint(tmp_path / "true.json", wave_density())
    for mode in ("timeslice", "stencil"):
        sim = tmp_path / f"sim_{mode}"
        code, _, _ = _run(capsys, "simulate", "--checkpoint", tmp_path / "true.json",
                          "--init", data / "trajectory_000.csv", "--mode", mode, "--out", sim)
        assert code == 0
        code, out, _ = _run(capsys, "eval", "--predicted", sim / "field.csv",
                            "--reference", data / "trajectory_000.csv", "--out", sim)
        assert json.loads(out)["linf"] < 1e-10
        assert json.loads((sim / "metrics.json").read_text())["time_levels"] == 7


def test_simulate_from_slices(tmp_path, capsys, config):
    io.write_checkpoint(tmp_path / "true.json", wave_density())
    x = np.arange(20) * 0.05
    io.write_slices(tmp_path / "init.csv", np.sin(2 * np.pi * x), np.sin(2 * np.pi * x))
    code, out, _ = _run(capsys, "simulate", "--config", config, "--checkpoint", tmp_path / "true.json",
                        "--init", tmp_path / "init.csv", "--steps", 3, "--out", tmp_path / "s")
    assert code == 0
    assert io.read_field(tmp_path / "s" / "field.csv").values.shape == (4, 20, 1)


def test_find_tw(tmp_path, capsys, config):
    io.write_checkpoint(tmp_path / "true.json", wave_density())
    code, out, _ = _run(capsys, "find-tw", "--config", config, "--checkpoint", tmp_path / "true.json",
                        "--m", 1, "--out", tmp_path / "tw")
    assert code == 0
    rep = json.loads(out)
    # 20 Adam steps from the exact wave: the speed stays close
    assert abs(rep["c"] - wave_tw_speed(1)) < 0.05
    assert io.read_profile(tmp_path / "tw" / "profile.csv").c == rep["c"]


def test_errors_are_reported_as_json(tmp_path, capsys):
    code, _, err = _run(capsys, "train", "--out", tmp_path / "o")
    assert code == 2 and json.loads(err)["error"] == "input"
    code, _, err = _run(capsys, "simulate", "--checkpoint", tmp_path / "missing.json",
                        "--init", tmp_path / "missing.csv", "--out", tmp_path / "o")
    assert code == 2 and json.loads(err)["error"] == "input"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"adam": {"learning_rate": 1}}))
    os.makedirs(tmp_path / "d", exist_ok=True)
    code, _, err = _run(capsys, "gen-data", "--config", bad, "--out", tmp_path / "d")
    assert code == 0
    code, _, err = _run(capsys, "train", "--config", bad, "--data", tmp_path / "d", "--out", tmp_path / "o")
    assert code == 2 and "learning_rate" in json.loads(err)["message"]
    (tmp_path / "c.json").write_text(json.dumps({"format": "lagfield-checkpoint 1", "backend": "gp"}))
    code, _, err = _run(capsys, "find-tw", "--checkpoint", tmp_path / "c.json", "--out", tmp_path / "o")
    assert code == 2 and json.loads(err)["error"] == "format"


def test_rom_command(tmp_path, capsys, config):
    data = tmp_path / "data"
    _run(capsys, "gen-data", "--config", config, "--out", data)
    io.write_checkpoint(tmp_path / "true.json", wave_density())
    rc = tmp_path / "rom.json"
    rc.write_text(json.dumps({"rom": {"r": 2, "epochs": 3}}))
    code, out, _ = _run(capsys, "rom", "--config", rc, "--data", data, "--checkpoint", tmp_path / "true.json",
                        "--out", tmp_path / "rom")
    assert code == 0
    rep = json.loads(out)
    assert rep["stencil_tw"] < 1e-9 and rep["stencil_sin"] < 1e-9
    assert {"rom_sin", "rom_tw", "reconstruction_error"} <= set(rep)
    assert io.read_basis(tmp_path / "rom" / "basis.csv").r == 2
