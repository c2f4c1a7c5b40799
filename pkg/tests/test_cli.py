import csv
import json

import pytest

from qeq.cli import SWEEP_COLUMNS, ExperimentConfig, ConfigError, run
from qeq.metrics import qfactor

TINY = {
    "data": {"n_train": 2000, "n_test": 1000, "steps_per_span": 5, "power_dbm": 2.0},
    "model": {"kind": "convfc", "M": 2, "K": 2, "n_h": 4},
    "train": {"epochs": 2, "retrain_epochs": 1, "calib_size": 256, "lr": 3e-3},
    "quant": {"strategy": "sab", "schedule": {"k1": 0, "k2": 1}, "n_groups": 2},
    "sweep": {"axis": "bits", "values": [6, 3]},
}


def write_config(path, d):
    path.write_text(json.dumps(d))
    return str(path)


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    """Simulate the tiny frames once; later configs point at the files."""
    root = tmp_path_factory.mktemp("sim")
    cfg = write_config(root / "c.json", TINY)
    assert run(["simulate", "--config", cfg, "--out", str(root)]) == 0
    d = json.loads(json.dumps(TINY))
    d["data"].update(train_path=str(root / "train.qeqd"), test_path=str(root / "test.qeqd"))
    return root, d


def test_config_unknown_field_path():
    with pytest.raises(ConfigError, match=r"^quant\.bogus"):
        ExperimentConfig.from_dict({"quant": {"bogus": 1}})


@pytest.mark.parametrize("bad, where", [
    ({"quant": {"strategy": "magic"}}, "quant.strategy"),
    ({"data": {"n_train": 0}}, "data.n_train"),
    ({"data": {"link": "nope"}}, "data.link"),
    ({"quant": {"strategy": "sab", "n_groups": 2, "group_bits": [1]}}, "quant.group_bits"),
    ({"model": {"kind": "convfc", "M": 1, "K": 5}}, "model"),
    ({"seed": -1}, "seed"),
])
def test_config_errors_name_the_field(bad, where):
    with pytest.raises(ConfigError) as e:
        ExperimentConfig.from_dict(bad)
    assert str(e.value).startswith(where)


def test_exit_codes(tmp_path, capsys):
    bad = write_config(tmp_path / "bad.json", {"train": {"epochs": "many"}})
    assert run(["train", "--config", bad, "--out", str(tmp_path)]) == 2
    (tmp_path / "broken.json").write_text("{not json")
    assert run(["train", "--config", str(tmp_path / "broken.json"), "--out", str(tmp_path)]) == 2
    assert run(["eval", "--checkpoint", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 4
    assert run(["train", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)]) == 4
    assert run(["quantize", "--out", str(tmp_path),
                "--config", write_config(tmp_path / "p.json", {"quant": {"strategy": "ptq"}})]) == 2
    err = capsys.readouterr().err
    assert "train.epochs" in err


def test_divergence_exit_code(sim, tmp_path):
    _, d = sim
    d = json.loads(json.dumps(d))
    d["train"]["lr"] = 1e200
    assert run(["train", "--config", write_config(tmp_path / "c.json", d), "--out", str(tmp_path)]) == 3


def test_complexity_reference_size(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"model": {"kind": "convfc", "M": 40, "K": 40, "n_h": 100}})
    assert run(["complexity", "--config", cfg, "--out", str(tmp_path)]) == 0
    d = json.loads((tmp_path / "complexity.json").read_text())
    assert d["real_mults_per_pol"] == 14_960
    assert json.loads(capsys.readouterr().out)["real_mults_per_pol"] == 14_960


def test_train_eval_round_trip(sim, tmp_path):
    root, d = sim
    cfg = write_config(tmp_path / "c.json", d)
    out = tmp_path / "run"
    assert run(["train", "--config", cfg, "--out", str(out)]) == 0
    rec = json.loads((out / "metrics.json").read_text())
    assert rec["strategy"] == "none" and rec["avg_bits_w"] == 32
    assert rec["q_db"] == pytest.approx(qfactor(rec["ber"]), abs=1e-9)
    assert "wall_s" not in rec and (out / "metrics.timing.json").exists()
    # evaluating on the training frame reproduces the recorded training BER exactly
    assert run(["eval", "--checkpoint", str(out / "model.json"), "--dataset", str(root / "train.qeqd"),
                "--out", str(out / "ev")]) == 0
    ev = json.loads((out / "ev" / "eval.json").read_text())
    assert ev["ber"] == rec["extra"]["train_ber"]

    assert run(["quantize", "--config", cfg, "--checkpoint", str(out / "model.json"), "--out", str(out / "q")]) == 0
    qrec = json.loads((out / "q" / "metrics.json").read_text())
    assert qrec["strategy"] == "sab" and qrec["avg_bits_w"] == 4
    assert qrec["complexity"]["memory_bits"] == 4 * qrec["complexity"]["layers"][0]["n_weights"] + \
        4 * sum(l["n_weights"] for l in qrec["complexity"]["layers"][1:])
    assert run(["complexity", "--checkpoint", str(out / "q" / "quantized.json"), "--out", str(out / "c")]) == 0
    assert json.loads((out / "c" / "complexity.json").read_text())["avg_bits_w"] == 4


def test_seed_flag_changes_run(sim, tmp_path):
    _, d = sim
    cfg = write_config(tmp_path / "c.json", d)
    for s in ("1", "2"):
        assert run(["train", "--config", cfg, "--seed", s, "--out", str(tmp_path / s)]) == 0
    a = json.loads((tmp_path / "1" / "metrics.json").read_text())
    b = json.loads((tmp_path / "2" / "metrics.json").read_text())
    assert a["seed"] == 1 and b["seed"] == 2


def test_sweep_csv(sim, tmp_path):
    _, d = sim
    cfg = write_config(tmp_path / "c.json", d)
    assert run(["sweep", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert run(["sweep", "--config", cfg, "--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
    rows = list(csv.DictReader((tmp_path / "a" / "sweep.csv").open()))
    assert list(rows[0]) == SWEEP_COLUMNS
    assert [float(r["avg_bits_w"]) for r in rows] == [6.0, 3.0]
    # per-point seeds are fixed by position, so parallel runs write the same table
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()
    pts = sorted((tmp_path / "a" / "points").glob("[0-9]*.json"))
    pts = [p for p in pts if "timing" not in p.name]
    assert [json.loads(p.read_text())["seed"] for p in pts] == [0, 1]


def test_strategy_sweep_rows(sim, tmp_path):
    _, d = sim
    d = json.loads(json.dumps(d))
    d["sweep"] = {"axis": "strategy", "values": ["none", "ptq", "sptq"]}
    assert run(["sweep", "--config", write_config(tmp_path / "c.json", d), "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader((tmp_path / "sweep.csv").open()))
    assert [r["strategy"] for r in rows] == ["none", "ptq", "sptq"]
    assert float(rows[0]["avg_bits_w"]) == 32 and float(rows[1]["avg_bits_w"]) == 4
