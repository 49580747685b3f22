import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from noisymix.cli import main
from noisymix.config import dataset_defaults, from_dict, load_config, to_dict
from noisymix.errors import ConfigError, NumericalError
from noisymix.mixing import stream
from noisymix.train import ablate, ablation_csv, init_model, log_csv, train, train_one

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def toy(**kw):
    return dataset_defaults("toy").with_(**kw)


def tiny_images(**kw):
    cfg = from_dict({"dataset": "images", "epochs": 1, "batch_size": 16, "seeds": [0], "aug_bank": 2,
                     "model": {"hidden": [8]}, "images": {"per_class": 6, "size": 8},
                     "loss": {"image_shape": [8, 8, 3]},
                     "eval": {"kinds": ["brightness", "white_noise"], "severities": [1, 3]}})
    return cfg.with_(**kw)


# ---- training loop ------------------------------------------------------------------------
def test_zero_epochs_returns_initial_model():
    cfg = toy(epochs=0, seeds=(3,))
    run = train_one(cfg, 3)
    fresh = init_model(cfg, 2, 2, stream(3, 0))
    assert run.log == []
    for k in fresh.params:
        assert np.array_equal(run.model.params[k], fresh.params[k])


def test_baseline_loss_decreases():
    cfg = toy(epochs=10, seeds=(0,)).with_toggles(False, False, False, False)
    losses = np.array([row[2] for row in train_one(cfg, 0).log])
    smooth = np.convolve(losses, np.ones(3) / 3, mode="valid")
    assert smooth[-1] < smooth[0]


def test_training_is_bit_reproducible():
    cfg = toy(epochs=3, seeds=(0, 1))
    assert log_csv(train(cfg)) == log_csv(train(cfg, workers=2))


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_aborts_with_context():
    cfg = toy(epochs=5, seeds=(2,))
    cfg = cfg.with_(optimizer=cfg.optimizer.__class__("sgd", 1e300))
    with pytest.raises(NumericalError) as info:
        train_one(cfg, 2)
    msg = str(info.value)
    assert "seed 2" in msg and "epoch" in msg and "step" in msg and '"lr": 1e+300' in msg


# ---- ablation --------------------------------------------------------------------------------
def test_ablation_gains_are_consistent():
    cfg = tiny_images(seeds=(0, 1))
    rows = ((False, False, False, False), (True, True, True, True))
    table = ablate(cfg, rows)
    off = {r["seed"]: r["robust_accuracy"] for r in table if not any((r["augment"], r["jsd"]))}
    for r in table:
        assert r["robustness_gain"] == r["robust_accuracy"] - off[r["seed"]]
        if not r["augment"]:
            assert r["robustness_gain"] == 0.0
    parsed = list(csv.DictReader(io.StringIO(ablation_csv(table))))
    for row in parsed:
        base = next(float(p["robust_accuracy"]) for p in parsed if p["seed"] == row["seed"] and p["augment"] == "0")
        assert float(row["robustness_gain"]) == float(row["robust_accuracy"]) - base


def test_ablation_adds_reference_row():
    cfg = tiny_images()
    table = ablate(cfg, [(True, False, False, True)])
    assert len(table) == 1 and 0 <= table[0]["robust_accuracy"] <= 1


def test_ablation_rejects_short_rows():
    with pytest.raises(ValueError):
        ablate(tiny_images(), [(True, False)])


# ---- configuration ------------------------------------------------------------------------------
def test_shipped_configs_load():
    for path in CONFIGS.glob("*.toml"):
        load_config(path)
    assert load_config(CONFIGS / "images.toml").loss.gamma == 12.0
    assert not load_config(CONFIGS / "toy_baseline.toml").loss.use_jsd


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError, match="loss.gama"):
        from_dict({"loss": {"gama": 1.0}})


def test_bad_boolean_is_rejected():
    with pytest.raises(ConfigError):
        from_dict({"loss": {"use_jsd": "yes"}})


def test_json_and_toml_agree(tmp_path):
    table = {"epochs": 7, "loss": {"gamma": 2.5}, "model": {"hidden": [16, 16], "mixable": [0, 2]}}
    (tmp_path / "c.json").write_text(json.dumps(table))
    (tmp_path / "c.toml").write_text('epochs = 7\n[loss]\ngamma = 2.5\n[model]\nhidden = [16, 16]\nmixable = [0, 2]\n')
    a, b = load_config(tmp_path / "c.json"), load_config(tmp_path / "c.toml")
    assert a == b and a.model.hidden == (16, 16)
    assert from_dict(to_dict(a)) == a


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.toml")


def test_invalid_mixable_layer():
    with pytest.raises(ConfigError):
        from_dict({"model": {"hidden": [4], "mixable": [5]}})


# ---- CLI --------------------------------------------------------------------------------------------
def test_cli_unknown_flag(capsys):
    assert main(["train", "--bogus"]) == 1
    assert "bogus" in capsys.readouterr().err


def test_cli_missing_config(tmp_path, capsys):
    missing = tmp_path / "missing.toml"
    assert main(["train", "--config", str(missing), "--out-dir", str(tmp_path)]) == 1
    assert str(missing) in capsys.readouterr().err


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_cli_train_writes_log(tmp_path):
    # the shipped baseline config with a short schedule; top-level keys must precede the tables
    cfg = _write(tmp_path, "c.toml", "epochs = 4\nseeds = [0, 1]\n" + (CONFIGS / "toy_baseline.toml").read_text())
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg), "--out-dir", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "train_log.csv")))
    assert len(rows) == 8 and set(rows[0]) == {"seed", "epoch", "train_loss", "test_accuracy"}
    summary = json.loads((out / "train_summary.json").read_text())
    assert set(summary["final_test_accuracy"]) == {"0", "1"}


def test_cli_seed_overrides(tmp_path):
    cfg = _write(tmp_path, "c.toml", "epochs = 2\n")
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg), "--seed", "7", "--out-dir", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "train_log.csv")))
    assert {r["seed"] for r in rows} == {"7"}


def test_cli_verify_thm1(tmp_path):
    out = tmp_path / "out"
    assert main(["verify-theory", "thm1", "--out-dir", str(out)]) == 0
    result = json.loads((out / "theory_thm1.json").read_text())
    assert result["passed"] and result["zero_residual"] <= 1e-10


def test_cli_gen_data_images(tmp_path):
    cfg = _write(tmp_path, "i.toml", 'dataset = "images"\n[images]\nper_class = 5\nsize = 8\n')
    out = tmp_path / "out"
    assert main(["gen-data", "--config", str(cfg), "--out-dir", str(out)]) == 0
    index = list(csv.DictReader(open(out / "images.csv")))
    assert len(index) == 20
    assert (out / index[0]["file"]).stat().st_size == 16 + 8 * 8 * 3 * 8


def test_cli_report_merges(tmp_path):
    out = tmp_path / "out"
    assert main(["gen-data", "--out-dir", str(out)]) == 0
    (out / "extra.json").write_text('{"a": 1}\n')
    assert main(["report", "--out-dir", str(out)]) == 0
    merged = json.loads((out / "report.json").read_text())
    assert merged["extra.json"] == {"a": 1} and len(merged["toy.csv"]) == 500
    assert main(["report", "--out-dir", str(out), str(out / "gone.json")]) == 1


def test_cli_eval_toy(tmp_path):
    cfg = _write(tmp_path, "c.toml", "epochs = 2\nseeds = [0]\n")
    out = tmp_path / "out"
    assert main(["eval-robustness", "--config", str(cfg), "--out-dir", str(out)]) == 0
    rep = json.loads((out / "eval.json").read_text())
    assert 0 <= rep["aurra"] <= 1 and 0 <= rep["rms_calibration_error"] <= 1


def _run_twice(tmp_path, argv):
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main([*argv, "--out-dir", str(out)]) == 0
        outs.append({p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    return outs


@pytest.mark.parametrize("command", ["gen-data", "train", "eval-robustness", "ablate"])
def test_cli_outputs_are_byte_identical(tmp_path, command):
    cfg = _write(tmp_path, "c.json", json.dumps({
        "dataset": "images", "epochs": 1, "batch_size": 16, "seeds": [0], "aug_bank": 2,
        "model": {"hidden": [8]}, "images": {"per_class": 4, "size": 8}, "loss": {"image_shape": [8, 8, 3]},
        "eval": {"kinds": ["brightness", "pixelate"], "severities": [2], "n_sequences": 2, "n_frames": 4}}))
    a, b = _run_twice(tmp_path, [command, "--config", str(cfg), "--threads", "2"])
    assert a and a == b
