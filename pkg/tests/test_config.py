"""Config schema: defaults, coercion, precedence, snapshot round-trips."""

import pytest

from anchortune.config import SCHEMA, Config, ConfigError, describe_schema, load_config


def test_defaults_match_benchmark_preset():
    cfg = load_config()
    assert cfg["data.rho"] == 0.9
    assert cfg["data.n_classes"] == 16
    assert cfg["train.shots"] == 16
    assert cfg["anchors.k"] == 32
    assert cfg["loss.omega"] == 1.0
    assert cfg["loss.combine"] == "additive_appendix"
    assert cfg["prompt.coupling"] == "nonlinear"
    assert cfg["eval.protocol"] == "base_to_novel"


def test_unknown_key_rejected_everywhere():
    cfg = Config()
    with pytest.raises(ConfigError, match="unknown config key"):
        cfg.set("data.bogus", 1)
    with pytest.raises(ConfigError, match="unknown config key"):
        cfg["data.bogus"]
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config(None, ["data.bogus=1"])


def test_string_coercion_by_field_type():
    cfg = load_config(None, ["data.rho=0.5", "train.epochs=3", "data.root=/x/y"])
    assert cfg["data.rho"] == 0.5 and isinstance(cfg["data.rho"], float)
    assert cfg["train.epochs"] == 3 and isinstance(cfg["train.epochs"], int)
    assert cfg["data.root"] == "/x/y"


def test_int_value_accepted_for_float_field():
    cfg = Config({"data.rho": 1})
    assert cfg["data.rho"] == 1.0 and isinstance(cfg["data.rho"], float)


def test_type_mismatch_rejected():
    with pytest.raises(ConfigError, match="expected int"):
        Config({"train.epochs": "ten"})
    with pytest.raises(ConfigError, match="expected int"):
        Config({"train.epochs": True})   # bools are not ints here


def test_choices_enforced():
    with pytest.raises(ConfigError, match="not in"):
        load_config(None, ["prompt.coupling=quadratic"])
    with pytest.raises(ConfigError, match="not in"):
        Config({"loss.combine": "averaged"})


def test_override_needs_key_value_shape():
    with pytest.raises(ConfigError, match="KEY=VALUE"):
        load_config(None, ["train.epochs"])


def test_config_file_parsing(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text(
        "# comment line\n"
        "\n"
        "train.epochs = 4\n"
        "data.rho = 0.25\n")
    cfg = load_config(path)
    assert cfg["train.epochs"] == 4
    assert cfg["data.rho"] == 0.25


def test_config_file_errors_carry_line_numbers(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("train.epochs = 4\nnot a key value line\n")
    with pytest.raises(ConfigError, match=r"bad\.cfg:2"):
        load_config(path)
    path.write_text("data.nope = 1\n")
    with pytest.raises(ConfigError, match=r"bad\.cfg:1.*unknown config key"):
        load_config(path)


def test_precedence_file_then_overrides_then_seed(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("seed = 11\ntrain.epochs = 4\n")
    cfg = load_config(path, ["train.epochs=9"], seed=99)
    assert cfg["train.epochs"] == 9
    assert cfg["seed"] == 99


def test_snapshot_round_trip_preserves_hash(tmp_path):
    cfg = load_config(None, ["train.learning_rate=0.00375", "data.rho=0.9",
                             "prompt.coupling=linear"])
    snap = tmp_path / "snap.cfg"
    snap.write_text(cfg.snapshot())
    again = load_config(snap)
    assert again.snapshot() == cfg.snapshot()
    assert again.hash() == cfg.hash()
    assert again["train.learning_rate"] == 0.00375


def test_snapshot_is_sorted_and_complete():
    cfg = load_config()
    lines = cfg.snapshot().strip().splitlines()
    keys = [line.split(" = ")[0] for line in lines]
    assert keys == sorted(SCHEMA)


def test_hash_changes_with_any_value():
    a = load_config()
    b = load_config(None, ["seed=1"])
    assert a.hash() != b.hash()


def test_describe_schema_lists_every_key():
    text = describe_schema()
    for key in SCHEMA:
        assert key in text
