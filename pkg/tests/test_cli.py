import csv
import json
from pathlib import Path

import numpy as np
import pytest

from fedamp.cli import EXIT_CONFIG, EXIT_OK, ExperimentConfig, build_experiment, dump_config, main, parse_config
from fedamp.data import write_idx_images, write_idx_labels
from fedamp.errors import ConfigError

ROOT = Path(__file__).resolve().parents[1]
EXAMPLE = ROOT / "configs" / "example_fedamp.json"

TINY = {
    "groups": 2,
    "classes": 4,
    "features": 3,
    "clients_per_group": 2,
    "train_samples": 20,
    "test_samples": 10,
    "epochs": 2,
    "batch_size": 10,
    "learning_rate": 0.05,
    "rounds": 3,
    "sigma": 1.0,
}


def write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def test_minimal_config_defaults_and_round_trip():
    cfg = parse_config('{"algorithm": "fedamp"}')
    assert cfg.lam == 1.0 and cfg.batch_size == 100 and cfg.epochs == 10 and cfg.learning_rate == 1e-3
    assert parse_config(dump_config(cfg)) == cfg
    assert cfg == ExperimentConfig()


def test_sigma_grid_value_accepted():
    assert parse_config('{"algorithm": "fedamp", "sigma": 100}').sigma == 100.0


@pytest.mark.parametrize(
    "doc, key",
    [
        ({"drop_rate": -0.1}, "drop_rate"),
        ({"learing_rate": 0.1}, "learing_rate"),
        ({"lam": 1.0}, "lam"),
        ({"epochs": "ten"}, "epochs"),
        ({"epochs": 2.5}, "epochs"),
        ({"exclude_dropped": 1}, "exclude_dropped"),
        ({"algorithm": "fedsgd"}, "algorithm"),
        ({"algorithm": "heurfedamp", "groups": 1, "clients_per_group": 1}, "algorithm"),
        ({"epoch_jitter": [0, 5]}, "epoch_jitter"),
        ({"epoch_jitter": [1]}, "epoch_jitter"),
        ({"data": "idx"}, "idx_images"),
        ({"data": "idx", "idx_images": "a", "idx_labels": "b", "partition": "iid"}, "clients"),
        ({"data": "idx", "idx_images": "a", "idx_labels": "b", "preset": "CIFAR100-100"}, "superclasses"),
        ({"self_weight": 1.5}, "self_weight"),
        ({"self_weight": [0.5, 0.5]}, "self_weight"),
        ({"attention": "mcp", "theta": 1.0}, "theta"),
        ({"train_samples": [10, 20]}, "train_samples"),
    ],
)
def test_schema_violations_name_the_key(doc, key):
    with pytest.raises(ConfigError) as info:
        parse_config(json.dumps(doc))
    assert info.value.key == key


def test_malformed_documents():
    for text in ("[1, 2]", "{not json", b"\xff\xfe"):
        with pytest.raises(ConfigError):
            parse_config(text)


def test_validate_example_config(capsys):
    assert main(["validate", "--config", str(EXAMPLE)]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["algorithm"] == "fedamp"


def test_validate_bad_config_exit_code(tmp_path, capsys):
    assert main(["validate", "--config", write(tmp_path, {"drop_rate": -1})]) == EXIT_CONFIG
    err = json.loads(capsys.readouterr().err)
    assert err["key"] == "drop_rate"
    assert main(["validate", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert main(["bogus"]) == EXIT_CONFIG


def test_presets_listing(capsys):
    assert main(["presets"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "EMNIST62: 62 clients" in out and "MNIST100" in out and "FMNIST100" in out and "CIFAR100-100" in out


def test_oracle_check_passes(capsys):
    assert main(["oracle-check"]) == EXIT_OK
    line = capsys.readouterr().out
    dev = float(line.split("max deviation ")[1].split()[0])
    assert dev < 1e-10 and "pass" in line


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_writes_outputs_and_summary_matches_csv(tmp_path):
    out = tmp_path / "run"
    cfg = write(tmp_path, {**TINY, "drop_rate": 0.25})
    assert main(["run", "--config", cfg, "--out", str(out), "--seed", "3"]) == EXIT_OK
    rows = read_csv(out / "metrics.csv")
    assert [int(r["round"]) for r in rows] == [1, 2, 3]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seed"] == 3
    assert summary["bmta"] == max(float(r["mean_test_acc"]) for r in rows)
    assert summary["final_G"] == float(rows[-1]["G"])
    collab = json.loads((out / "collab.json").read_text())
    assert collab["groups"] == [0, 0, 1, 1]
    assert np.allclose(np.array(collab["weights"]).sum(axis=1), 1.0)


@pytest.mark.parametrize("algorithm", ["heurfedamp", "fedavg", "fedprox", "fedavg_ft", "fedprox_ft", "separate"])
def test_run_every_algorithm(tmp_path, algorithm):
    out = tmp_path / algorithm
    assert main(["run", "--config", write(tmp_path, {**TINY, "algorithm": algorithm, "rounds": 2}), "--out", str(out)]) == EXIT_OK
    assert len(read_csv(out / "metrics.csv")) == 2


def test_run_twice_is_byte_identical(tmp_path):
    cfg = write(tmp_path, {**TINY, "epoch_jitter": [1, 3], "drop_rate": 0.2})
    for name, threads in (("a", "1"), ("b", "1"), ("c", "4")):
        assert main(["run", "--config", cfg, "--out", str(tmp_path / name), "--threads", threads]) == EXIT_OK
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes() == (tmp_path / "c" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "c" / "summary.json").read_bytes()


def test_seed_flag_overrides_config(tmp_path):
    cfg = write(tmp_path, {**TINY, "rounds": 1, "seed": 0})
    main(["run", "--config", cfg, "--out", str(tmp_path / "s0")])
    main(["run", "--config", cfg, "--out", str(tmp_path / "s5"), "--seed", "5"])
    assert json.loads((tmp_path / "s5" / "summary.json").read_text())["seed"] == 5
    assert (tmp_path / "s0" / "metrics.csv").read_bytes() != (tmp_path / "s5" / "metrics.csv").read_bytes()


def test_runtime_error_exit_code(tmp_path, capsys):
    cfg = write(tmp_path, {**TINY, "algorithm": "fedamp", "weight_mode": "strict", "schedule": "step_decay"})
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "x")]) == 3
    assert json.loads(capsys.readouterr().err)["error"] == "StepSizeTooLargeError"


def test_idx_practical_run(tmp_path):
    r = np.random.default_rng(0)
    n_per = 60
    labels = np.repeat(np.arange(4), n_per)
    imgs = (r.integers(0, 60, (labels.size, 2, 2)) + 40 * labels[:, None, None]).astype(np.uint8)
    write_idx_images(imgs, tmp_path / "img")
    write_idx_labels(labels, tmp_path / "lab")
    doc = {
        **{k: v for k, v in TINY.items() if k not in ("groups", "classes", "features", "clients_per_group", "train_samples", "test_samples")},
        "data": "idx",
        "idx_images": str(tmp_path / "img"),
        "idx_labels": str(tmp_path / "lab"),
        "partition": "pathological",
        "clients": 3,
        "rounds": 1,
    }
    exp = build_experiment(parse_config(json.dumps(doc)))
    assert len(exp.clients) == 3
    assert exp.groups == [0, 1, 2]
    assert main(["run", "--config", write(tmp_path, doc), "--out", str(tmp_path / "o")]) == EXIT_OK
    doc["idx_labels"] = str(tmp_path / "img")
    assert main(["run", "--config", write(tmp_path, doc, "bad.json"), "--out", str(tmp_path / "o2")]) == EXIT_CONFIG


def test_group_self_weights():
    cfg = parse_config(json.dumps({**TINY, "algorithm": "heurfedamp", "clients_per_group": [2, 4]}))
    assert build_experiment(cfg).algorithm.self_weights == (0.5, 0.5, 0.25, 0.25, 0.25, 0.25)
    cfg = parse_config(json.dumps({**TINY, "algorithm": "heurfedamp", "clients_per_group": [1, 3]}))
    with pytest.raises(ConfigError) as info:
        build_experiment(cfg)
    assert info.value.key == "self_weight"
