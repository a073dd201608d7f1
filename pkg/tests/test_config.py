import json

import pytest

from app.utils.config import ConfigError, load_settings, log_level, model_endpoint
from app.utils.constants import DEFAULT_RUN_SETTINGS
from app.utils.jsonl import read_jsonl, write_jsonl


def test_missing_config_file_gives_defaults(tmp_path):
    assert load_settings(str(tmp_path / "absent.json")) == DEFAULT_RUN_SETTINGS


def test_config_file_overrides_known_keys(tmp_path):
    path = tmp_path / "settings.json"
    path.write_text(json.dumps({"detector": "react", "k": 3, "colour": "blue"}), encoding="utf-8")
    settings = load_settings(str(path))
    assert settings["detector"] == "react"
    assert settings["k"] == 3
    assert "colour" not in settings
    assert settings["max_iterations"] == DEFAULT_RUN_SETTINGS["max_iterations"]


@pytest.mark.parametrize("text", ["{broken", "[1, 2]"])
def test_bad_config_files(tmp_path, text):
    path = tmp_path / "settings.json"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(ConfigError):
        load_settings(str(path))


def test_environment_settings(monkeypatch):
    monkeypatch.setenv("JITSCAN_LOG_LEVEL", "debug")
    assert log_level() == "DEBUG"
    monkeypatch.delenv("JITSCAN_MODEL_TIMEOUT", raising=False)
    monkeypatch.setenv("JITSCAN_MODEL_URL", "http://model.local")
    assert model_endpoint()[0] == "http://model.local"
    assert model_endpoint()[2] == 60.0


def test_jsonl_round_trip_and_bad_lines(tmp_path):
    path = str(tmp_path / "nested" / "rows.jsonl")
    write_jsonl(path, [{"b": 1, "a": "ü"}, {"c": None}])
    with open(path, "r", encoding="utf-8") as f:
        assert f.readline() == '{"a": "ü", "b": 1}\n'
    assert read_jsonl(path) == [{"a": "ü", "b": 1}, {"c": None}]

    with open(path, "a", encoding="utf-8") as f:
        f.write("\nnot json\n")
    with pytest.raises(ValueError, match=":4:"):
        read_jsonl(path)
