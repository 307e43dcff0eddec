"""Layered configuration: defaults, file, flags, environment."""

from __future__ import annotations

from pathlib import Path

import pytest

from guardweave.config import CONFIG_FILENAME, Config, ConfigError, resolve


def write_toml(tmp_path: Path, text: str, name: str = "settings.toml") -> Path:
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_defaults_need_no_sources():
    config = resolve(env={})
    assert config == Config()
    assert config.store_path == Path("guardweave-store")
    assert config.backend == "scripted"
    assert config.port == 8466
    assert config.auto_resume is True
    assert config.parallelism == 4


def test_file_settings_override_defaults(tmp_path):
    path = write_toml(
        tmp_path,
        'store_path = "/tmp/elsewhere"\nport = 9000\nauto_resume = false\n',
    )
    config = resolve(path, env={})
    assert config.store_path == Path("/tmp/elsewhere")
    assert config.port == 9000
    assert config.auto_resume is False
    # untouched keys keep their defaults
    assert config.backend == "scripted"


def test_config_file_in_cwd_is_picked_up_automatically(tmp_path, monkeypatch):
    write_toml(tmp_path, "port = 7001\n", name=CONFIG_FILENAME)
    monkeypatch.chdir(tmp_path)
    assert resolve(env={}).port == 7001


def test_cli_flags_override_the_file(tmp_path):
    path = write_toml(tmp_path, "port = 9000\nparallelism = 2\n")
    config = resolve(path, cli={"port": 9100, "parallelism": None}, env={})
    assert config.port == 9100  # flag wins
    assert config.parallelism == 2  # unset flag (None) leaves the file value


def test_environment_overrides_everything(tmp_path):
    path = write_toml(tmp_path, "port = 9000\n")
    config = resolve(
        path,
        cli={"port": 9100, "backend": "replay"},
        env={"GUARDWEAVE_PORT": "9200", "GUARDWEAVE_AUTO_RESUME": "off"},
    )
    assert config.port == 9200
    assert config.backend == "replay"
    assert config.auto_resume is False


def test_environment_values_are_coerced_from_strings():
    config = resolve(
        env={
            "GUARDWEAVE_PARALLELISM": "8",
            "GUARDWEAVE_STORE_PATH": "/data/runs",
            "GUARDWEAVE_AUTO_RESUME": "TRUE",
        }
    )
    assert config.parallelism == 8
    assert config.store_path == Path("/data/runs")
    assert config.auto_resume is True


@pytest.mark.parametrize("word,expected", [
    ("1", True), ("true", True), ("yes", True), ("on", True),
    ("0", False), ("false", False), ("no", False), ("off", False),
])
def test_boolean_words(word, expected):
    assert resolve(env={"GUARDWEAVE_AUTO_RESUME": word}).auto_resume is expected


def test_missing_explicit_file_is_an_error(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        resolve(tmp_path / "nope.toml", env={})


def test_unknown_file_key_is_an_error(tmp_path):
    path = write_toml(tmp_path, "prot = 9000\n")
    with pytest.raises(ConfigError, match="unknown keys prot"):
        resolve(path, env={})


def test_malformed_toml_is_an_error(tmp_path):
    path = write_toml(tmp_path, "port = = 9000\n")
    with pytest.raises(ConfigError):
        resolve(path, env={})


@pytest.mark.parametrize("key,value,hint", [
    ("port", "0", "1..65535"),
    ("port", "70000", "1..65535"),
    ("port", "soon", "integer"),
    ("parallelism", "0", ">= 1"),
    ("backend", "quantum", "one of"),
    ("auto_resume", "maybe", "true/false"),
])
def test_out_of_range_values_are_rejected_with_the_key_named(key, value, hint):
    with pytest.raises(ConfigError, match=f"{key}: .*") as info:
        resolve(env={f"GUARDWEAVE_{key.upper()}": value})
    assert hint in str(info.value)


def test_booleans_are_not_integers(tmp_path):
    path = write_toml(tmp_path, "port = true\n")
    with pytest.raises(ConfigError, match="port"):
        resolve(path, env={})


def test_unknown_cli_keys_are_ignored():
    # argparse namespaces carry subcommand fields too; only known keys apply
    config = resolve(cli={"command": "serve", "json": True, "port": 7500}, env={})
    assert config.port == 7500


def test_to_json_is_plain_data(tmp_path):
    path = write_toml(tmp_path, 'store_path = "st"\n')
    assert resolve(path, env={}).to_json() == {
        "store_path": "st",
        "backend": "scripted",
        "model_api_base": "",
        "port": 8466,
        "auto_resume": True,
        "parallelism": 4,
    }
