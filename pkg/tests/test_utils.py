import pytest

from src.errors import ConfigError
from src.utils import dumps_json, load_json, normalize_text, save_json


def test_save_json_writes_the_stable_rendering(tmp_path):
    data = {"b": [1, 2.5], "a": {"label": "Zürich", "entity": None}}
    path = save_json(data, tmp_path / "out" / "report.json")

    text = path.read_text(encoding="utf-8")
    assert text == dumps_json(data) + "\n"
    assert text.startswith('{\n  "a": {\n    "entity": null,\n    "label": "Zürich"')
    assert load_json(path) == data


def test_load_json_names_the_bad_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_json(tmp_path / "absent.json")
    bad = tmp_path / "truth.json"
    bad.write_text('{"subjects": [', encoding="utf-8")
    with pytest.raises(ConfigError, match="truth.json"):
        load_json(bad)


def test_dumps_json_rejects_nan():
    with pytest.raises(ValueError):
        dumps_json({"score": float("nan")})


def test_normalize_text():
    assert normalize_text("  Los   ANGELES ") == "los angeles"
