import json
from pathlib import Path

import numpy as np
import pytest

from msanet.cli import (
    ENV_OUT_DIR,
    ConfigError,
    RunConfig,
    build_network,
    load_weights,
    main,
    resolve_output_dir,
    save_weights,
    write_metrics_csv,
    write_metrics_json,
)
from msanet.layers import (
    Activation,
    BatchNorm,
    BinaryDense,
    FloatDense,
    Network,
    TernaryDense,
)
from msanet.msa import MetricsRecord


def _base_config(**over) -> dict:
    cfg = {
        "network": [{"kind": "binary_dense", "in_dim": 6, "out_dim": 3}],
        "loss": "mean_square",
        "optimizer": "binary_msa",
        "dataset": {"kind": "synthetic_regression", "d0": 6, "d1": 3, "S": 200},
    }
    cfg.update(over)
    return cfg


def _write_config(tmp_path, name="config.json", **over) -> Path:
    path = tmp_path / name
    path.write_text(json.dumps(_base_config(**over)))
    return path


# config parsing and validation ----------------------------------------------

def test_config_from_file_round_trip(tmp_path):
    cfg = RunConfig.from_file(_write_config(tmp_path, epochs=5, seed=3))
    assert cfg.epochs == 5
    assert cfg.seed == 3
    assert cfg.lam == 1e-7
    assert cfg.output_dir == "runs/run"
    assert cfg.train_config().optimizer == "binary_msa"


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        RunConfig.from_file(tmp_path / "nope.json")

    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        RunConfig.from_file(bad)

    arr = tmp_path / "arr.json"
    arr.write_text("[1, 2]")
    with pytest.raises(ConfigError, match="JSON object"):
        RunConfig.from_file(arr)

    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps(_base_config(typo=1)))
    with pytest.raises(ConfigError, match="unknown config keys"):
        RunConfig.from_file(unknown)

    missing = tmp_path / "missing.json"
    missing.write_text(json.dumps({"loss": "mean_square"}))
    with pytest.raises(ConfigError, match="missing required key"):
        RunConfig.from_file(missing)


def test_config_validates_loss_and_optimizer(tmp_path):
    with pytest.raises(ConfigError, match="loss must be one of"):
        RunConfig.from_file(_write_config(tmp_path, loss="l1"))
    with pytest.raises(ConfigError, match="optimizer must be one of"):
        RunConfig.from_file(_write_config(tmp_path, optimizer="sgd"))
    with pytest.raises(ConfigError, match="epochs"):
        RunConfig.from_file(_write_config(tmp_path, epochs=-1))


def test_config_validates_layer_chain(tmp_path):
    net = [
        {"kind": "binary_dense", "in_dim": 6, "out_dim": 4},
        {"kind": "activation", "fn": "relu", "dim": 5},
    ]
    with pytest.raises(ConfigError, match="does not match previous"):
        RunConfig.from_file(_write_config(tmp_path, network=net))
    with pytest.raises(ConfigError, match="kind must be one of"):
        RunConfig.from_file(_write_config(
            tmp_path, network=[{"kind": "conv", "in_dim": 6, "out_dim": 3}]
        ))
    with pytest.raises(ConfigError, match="fn must be one of"):
        RunConfig.from_file(_write_config(
            tmp_path,
            network=[{"kind": "binary_dense", "in_dim": 6, "out_dim": 3},
                     {"kind": "activation", "fn": "gelu", "dim": 3}],
        ))
    with pytest.raises(ConfigError, match="in_dim/out_dim"):
        RunConfig.from_file(_write_config(
            tmp_path, network=[{"kind": "binary_dense", "in_dim": 0,
                                "out_dim": 3}]
        ))


def test_config_checks_optimizer_against_layer_kinds(tmp_path):
    ternary = [{"kind": "ternary_dense", "in_dim": 6, "out_dim": 3}]
    with pytest.raises(ConfigError, match="binary_msa cannot"):
        RunConfig.from_file(_write_config(tmp_path, network=ternary))
    binary = _base_config()["network"]
    with pytest.raises(ConfigError, match="ternary_msa cannot"):
        RunConfig.from_file(_write_config(tmp_path, network=binary,
                                          optimizer="ternary_msa"))
    with pytest.raises(ConfigError, match="all-smooth"):
        RunConfig.from_file(_write_config(tmp_path, optimizer="gradient"))


def test_config_dataset_rules(tmp_path):
    with pytest.raises(ConfigError, match="needs a 'dir'"):
        RunConfig.from_file(_write_config(
            tmp_path, loss="squared_hinge", dataset={"kind": "mnist"}
        ))
    with pytest.raises(ConfigError, match="mnist provides labels"):
        RunConfig.from_file(_write_config(
            tmp_path, dataset={"kind": "mnist", "dir": "x"}
        ))
    with pytest.raises(ConfigError, match="use mean_square"):
        RunConfig.from_file(_write_config(tmp_path, loss="squared_hinge"))
    with pytest.raises(ConfigError, match="d0 must match"):
        RunConfig.from_file(_write_config(
            tmp_path,
            dataset={"kind": "synthetic_regression", "d0": 5, "d1": 3, "S": 10},
        ))
    with pytest.raises(ConfigError, match="dataset.kind"):
        RunConfig.from_file(_write_config(tmp_path, dataset={"kind": "csv"}))


# network construction -------------------------------------------------------

def test_build_network_is_deterministic_in_the_seed():
    cfg = RunConfig(**_base_config(seed=11))
    a = build_network(cfg)
    b = build_network(cfg)
    assert np.array_equal(a.layers[0].theta, b.layers[0].theta)


def test_build_network_ternary_lam_default_and_override():
    spec = {
        "network": [
            {"kind": "ternary_dense", "in_dim": 4, "out_dim": 3},
            {"kind": "ternary_dense", "in_dim": 3, "out_dim": 2, "lam": 0.5},
        ],
        "loss": "squared_hinge",
        "optimizer": "ternary_msa",
        "dataset": {"kind": "mnist", "dir": "x"},
        "lam": 0.123,
    }
    net = build_network(RunConfig(**spec))
    assert net.layers[0].lam == 0.123
    assert net.layers[1].lam == 0.5


# weights container ----------------------------------------------------------

def _full_net() -> Network:
    rng = np.random.default_rng(20)
    bn = BatchNorm(
        rng.standard_normal(4), rng.standard_normal(4),
        rng.standard_normal(4), np.abs(rng.standard_normal(4)),
        eps=1e-4, momentum=0.8,
    )
    return Network([
        BinaryDense.random(5, 4, rng),
        bn,
        Activation("softplus", 4),
        TernaryDense.random(4, 3, 0.01, rng),
        FloatDense.random(3, 2, rng),
    ])


def test_weights_round_trip_every_layer_kind(tmp_path):
    net = _full_net()
    path = tmp_path / "weights.msaw"
    save_weights(path, net)
    loaded = load_weights(path)

    assert np.array_equal(loaded.layers[0].theta, net.layers[0].theta)
    for name in ("gamma", "beta", "running_mean", "running_var"):
        assert np.array_equal(getattr(loaded.layers[1], name),
                              getattr(net.layers[1], name))
    assert loaded.layers[1].eps == 1e-4
    assert loaded.layers[1].momentum == 0.8
    assert loaded.layers[2].kind == "softplus"
    assert loaded.layers[2].in_dim == 4
    assert np.array_equal(loaded.layers[3].theta, net.layers[3].theta)
    assert loaded.layers[3].lam == 0.01
    assert np.array_equal(loaded.layers[4].weight, net.layers[4].weight)
    assert np.array_equal(loaded.layers[4].bias, net.layers[4].bias)

    # a second save of the loaded net must be byte identical
    save_weights(tmp_path / "again.msaw", loaded)
    assert (tmp_path / "again.msaw").read_bytes() == path.read_bytes()


def test_weights_round_trip_without_bias(tmp_path):
    rng = np.random.default_rng(21)
    net = Network([FloatDense.random(3, 2, rng, bias=False)])
    path = tmp_path / "w.msaw"
    save_weights(path, net)
    loaded = load_weights(path)
    assert loaded.layers[0].bias is None
    assert np.array_equal(loaded.layers[0].weight, net.layers[0].weight)


def test_weights_container_rejects_tampered_files(tmp_path):
    path = tmp_path / "w.msaw"
    save_weights(path, _full_net())
    buf = path.read_bytes()

    cases = [
        (b"XXXX" + buf[4:], "bad magic"),
        (buf[:4] + bytes([2]) + buf[5:], "unsupported container version"),
        (buf[:9] + bytes([77]) + buf[10:], "unknown layer tag"),
        (buf[:-4], "truncated"),
        (buf + b"\x00\x00", "trailing bytes"),
    ]
    for tampered, message in cases:
        bad = tmp_path / "bad.msaw"
        bad.write_bytes(tampered)
        with pytest.raises(ConfigError, match=message):
            load_weights(bad)
    with pytest.raises(ConfigError, match="not found"):
        load_weights(tmp_path / "absent.msaw")


def test_weights_container_rejects_unknown_activation(tmp_path):
    path = tmp_path / "w.msaw"
    save_weights(path, Network([Activation("relu", 3)]))
    buf = bytearray(path.read_bytes())
    buf[10] = 9  # activation sub-tag, right after the layer tag byte
    path.write_bytes(bytes(buf))
    with pytest.raises(ConfigError, match="unknown activation tag"):
        load_weights(path)


# metrics files --------------------------------------------------------------

def _records():
    return [
        MetricsRecord(epoch=0, step=4, j_train=0.5, train_error=0.25,
                      test_error=None, nonzero_fraction=0.75,
                      sparsity_per_layer=[0.25], wall_ms=12.0),
        MetricsRecord(epoch=1, step=8, j_train=1.0 / 3.0, train_error=0.0,
                      test_error=0.125, nonzero_fraction=0.5,
                      sparsity_per_layer=[0.5], wall_ms=11.0),
    ]


def test_metrics_csv_exact_text(tmp_path):
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, _records())
    want = (
        "epoch,step,j_train,train_error,test_error,nonzero_fraction,sparsity_l0\r\n"
        "0,4,0.5,0.25,,0.75,0.25\r\n"
        "1,8,0.3333333333333333,0.0,0.125,0.5,0.5\r\n"
    )
    assert path.read_bytes().decode() == want


def test_metrics_csv_empty_records_writes_header_only(tmp_path):
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, [])
    assert path.read_bytes().decode() == \
        "epoch,step,j_train,train_error,test_error,nonzero_fraction\r\n"


def test_metrics_json_structure(tmp_path):
    path = tmp_path / "metrics.json"
    cfg = RunConfig(**_base_config())
    write_metrics_json(path, _records(), cfg)
    payload = json.loads(path.read_text())
    assert payload["config"]["optimizer"] == "binary_msa"
    assert payload["config"]["lam"] == 1e-7
    assert len(payload["epochs"]) == 2
    assert payload["epochs"][0]["wall_ms"] == 12.0
    assert payload["epochs"][1]["test_error"] == 0.125


# output directory -----------------------------------------------------------

def test_resolve_output_dir_prefers_the_environment(tmp_path, monkeypatch):
    cfg = RunConfig(**_base_config(output_dir=str(tmp_path / "from_cfg")))
    monkeypatch.delenv(ENV_OUT_DIR, raising=False)
    out = resolve_output_dir(cfg)
    assert out == tmp_path / "from_cfg"
    assert out.is_dir()

    monkeypatch.setenv(ENV_OUT_DIR, str(tmp_path / "from_env"))
    out = resolve_output_dir(cfg)
    assert out == tmp_path / "from_env"
    assert out.is_dir()


# end-to-end commands --------------------------------------------------------

def _e2e_config(tmp_path, **over) -> Path:
    over.setdefault("epochs", 3)
    over.setdefault("batch_size", 50)
    over.setdefault("dataset", {
        "kind": "synthetic_regression", "d0": 6, "d1": 3, "S": 200,
        "test_size": 40,
    })
    return _write_config(tmp_path, **over)


def test_train_eval_diagnose_round_trip(tmp_path, monkeypatch, capsys):
    out_dir = tmp_path / "out"
    monkeypatch.setenv(ENV_OUT_DIR, str(out_dir))
    config = _e2e_config(tmp_path)

    assert main(["train", str(config)]) == 0
    for name in ("weights.msaw", "metrics.csv", "metrics.json",
                 "config_resolved.json"):
        assert (out_dir / name).is_file()
    assert "epoch" in capsys.readouterr().out

    weights = out_dir / "weights.msaw"
    assert main(["eval", str(config), str(weights), "--split", "train"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("split=train J=")

    assert main(["eval", str(config), str(weights)]) == 0
    assert capsys.readouterr().out.startswith("split=test")

    assert main(["diagnose", str(config), str(weights),
                 "--perturbations", "5"]) == 0
    payload = json.loads((out_dir / "diagnostics.json").read_text())
    assert payload["batch_size"] == 50
    assert len(payload["perturbations"]) == 5
    assert "fitted_c" in payload
    assert payload["pmp_residual"]["state_residual"] == 0.0


def test_eval_missing_test_split_exits_2(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(ENV_OUT_DIR, str(tmp_path / "out"))
    config = _e2e_config(tmp_path, dataset={
        "kind": "synthetic_regression", "d0": 6, "d1": 3, "S": 200,
    })
    assert main(["train", str(config)]) == 0
    weights = tmp_path / "out" / "weights.msaw"
    assert main(["eval", str(config), str(weights)]) == 2
    assert "not available" in capsys.readouterr().err


def test_cli_exit_codes_for_bad_inputs(tmp_path, capsys):
    assert main(["train", str(tmp_path / "absent.json")]) == 2
    assert "error:" in capsys.readouterr().err

    bad = _write_config(tmp_path, name="bad.json", epochs=-1)
    assert main(["train", str(bad)]) == 2

    config = _e2e_config(tmp_path)
    assert main(["diagnose", str(config), str(tmp_path / "nope.msaw")]) == 2


def test_train_runs_are_byte_identical(tmp_path, monkeypatch):
    config = _e2e_config(tmp_path, seed=9)
    outputs = []
    for name in ("a", "b"):
        out_dir = tmp_path / name
        monkeypatch.setenv(ENV_OUT_DIR, str(out_dir))
        assert main(["train", str(config)]) == 0
        outputs.append(out_dir)
    assert (outputs[0] / "metrics.csv").read_bytes() == \
        (outputs[1] / "metrics.csv").read_bytes()
    assert (outputs[0] / "weights.msaw").read_bytes() == \
        (outputs[1] / "weights.msaw").read_bytes()
