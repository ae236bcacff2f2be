from __future__ import annotations

import json
import math

import numpy as np
import pytest

from svoacc.cli import main, parse_axis, parse_phi, parse_phi_list, sha256
from svoacc.controller import load_params
from svoacc.ingest import load_csv
from svoacc.training import TrainConfig, initial_params


SMALL_NET = ["--hidden-dim", "4", "--seq-len", "3"]


@pytest.fixture(scope="module")
def scenario_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scenario")
    assert main(["gen-synthetic", "--duration", "8", "--out", str(out)]) == 0
    return out


def test_parse_phi():
    assert parse_phi("0") == 0.0
    assert parse_phi("pi/4") == math.pi / 4
    assert parse_phi("pi/2") == math.pi / 2
    assert parse_phi("0.5") == 0.5
    assert parse_phi_list("pi/2,0,pi/4") == (0.0, math.pi / 4, math.pi / 2)
    with pytest.raises(ValueError):
        parse_phi("pi")
    with pytest.raises(ValueError):
        parse_phi("abc")


def test_parse_axis():
    assert parse_axis("1,2.5") == (1.0, 2.5)
    assert parse_axis("0.5:1.0:0.25") == (0.5, 0.75, 1.0)
    with pytest.raises(ValueError):
        parse_axis("1:0:0.5")


def test_gen_synthetic_outputs(scenario_dir):
    names = {p.name for p in scenario_dir.iterdir()}
    assert {"scenario.csv", "scenario.json", "manifest.json"} <= names
    series = load_csv(scenario_dir / "scenario.csv")
    assert [s.vehicle_id for s in series] == [1, 2, 3, 4, 5]
    manifest = json.loads((scenario_dir / "manifest.json").read_text())
    assert manifest["subcommand"] == "gen-synthetic"
    assert manifest["seed"] == 0
    assert manifest["config"]["dt"] == 0.1


def test_gen_synthetic_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["gen-synthetic", "--duration", "5", "--seed", "7", "--leader-noise", "0.1",
                     "--out", str(tmp_path / d)]) == 0
    for name in ("scenario.csv", "scenario.json", "manifest.json"):
        assert sha256(tmp_path / "a" / name) == sha256(tmp_path / "b" / name)


def test_zero_duration_is_input_error(tmp_path, capsys):
    assert main(["gen-synthetic", "--duration", "0", "--out", str(tmp_path)]) == 2
    assert "duration" in capsys.readouterr().err


def test_calibrate_recovers_generating_params(scenario_dir, tmp_path):
    out = tmp_path / "cal"
    code = main(["calibrate", str(scenario_dir / "scenario.csv"), "--out", str(out),
                 "--a-max", "1.19,1.31,1.7", "--b", "0.5,3", "--delta", "2.81,5"])
    assert code == 0
    result = json.loads((out / "calibration.json").read_text())
    # vehicle 3 follows the calibrated v3 row, vehicle 5 the v5 row
    assert (result["3"]["a_max"], result["3"]["b"], result["3"]["delta"]) == (1.19, 0.5, 2.81)
    assert (result["5"]["a_max"], result["5"]["b"], result["5"]["delta"]) == (1.7, 0.5, 5.0)
    assert result["3"]["rmse"] <= 1e-6 and result["5"]["rmse"] <= 1e-6
    assert "rmse_m" in (out / "calibration.txt").read_text()


def test_calibrate_missing_file(tmp_path):
    assert main(["calibrate", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == 2


def test_train_zero_lr_checkpoint_is_init(scenario_dir, tmp_path):
    out = tmp_path / "t0"
    assert main(["train", "--scenario", str(scenario_dir), "--epochs", "1", "--lr", "0",
                 "--out", str(out)] + SMALL_NET) == 0
    params = load_params(out / "checkpoint.bin")
    from svoacc.cli import load_scenario
    scenario, _ = load_scenario(scenario_dir)
    expected = initial_params(TrainConfig(scenario, hidden_dim=4, seq_len=3))
    np.testing.assert_array_equal(params.to_vector(), expected.to_vector())
    history = (out / "history.csv").read_text().splitlines()
    assert len(history) == 2 and history[0].startswith("epoch,total")


def test_train_and_evaluate_are_deterministic(scenario_dir, tmp_path):
    digests = []
    for d in ("a", "b"):
        out = tmp_path / d
        assert main(["train", "--scenario", str(scenario_dir), "--epochs", "3",
                     "--out", str(out / "train")] + SMALL_NET) == 0
        assert main(["evaluate", str(out / "train" / "checkpoint.bin"), "--scenario", str(scenario_dir),
                     "--out", str(out / "eval")]) == 0
        assert main(["report", str(out / "eval")]) == 0
        digests.append([sha256(out / "train" / "checkpoint.bin"), sha256(out / "train" / "history.csv")]
                       + [sha256(out / "eval" / n) for n in
                          ("table.csv", "table.txt", "trajectories.csv", "bars.csv", "report.txt")])
    assert digests[0] == digests[1]
    report = (tmp_path / "a" / "eval" / "report.txt").read_text()
    assert "vehicle 3 at phi pi/2" in report


def test_evaluate_baseline_only_gives_zero_percentages(scenario_dir, tmp_path):
    assert main(["train", "--scenario", str(scenario_dir), "--epochs", "1", "--lr", "0",
                 "--out", str(tmp_path / "t")] + SMALL_NET) == 0
    assert main(["evaluate", str(tmp_path / "t" / "checkpoint.bin"), "--scenario", str(scenario_dir),
                 "--phis", "0", "--out", str(tmp_path / "e")]) == 0
    rows = (tmp_path / "e" / "table.csv").read_text().splitlines()[1:]
    assert rows and all(r.split(",")[4:] == ["0.0", "0.0"] for r in rows)


def test_evaluate_rejects_bad_checkpoint(scenario_dir, tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not a checkpoint")
    assert main(["evaluate", str(bad), "--scenario", str(scenario_dir), "--out", str(tmp_path / "e")]) == 2


def test_report_on_empty_dir(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 2
    assert "table.csv" in capsys.readouterr().err


def test_divergence_exit_status(scenario_dir, tmp_path, monkeypatch):
    import svoacc.cli as cli
    from svoacc.core import DivergenceError

    def boom(*args, **kwargs):
        raise DivergenceError(4)

    monkeypatch.setattr(cli, "train", boom)
    assert main(["train", "--scenario", str(scenario_dir), "--epochs", "2",
                 "--out", str(tmp_path)] + SMALL_NET) == 3
