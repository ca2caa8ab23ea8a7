import pytest
import os
import json
import shutil
import pandas as pd
from app.brw.errors import ConfigError
from app.harness.exporter import ExporterTool, JSON_SCHEMA_VERSION
from app.harness.core import StageResult

EXPORT_DIR = os.path.join("outputs", "test_exports")


@pytest.fixture(autouse=True)
def cleanup_exports():
    """Clean up exports directory before and after tests."""
    if os.path.exists(EXPORT_DIR):
        shutil.rmtree(EXPORT_DIR)
    yield
    if os.path.exists(EXPORT_DIR):
        shutil.rmtree(EXPORT_DIR)


def test_export_snapshots_csv():
    frame = pd.DataFrame({"replica": [0, 1], "W": [0.1, 1.0 / 3.0], "D": [0.0, 2.5e-17]})
    csv_path = ExporterTool.export_csv(frame, EXPORT_DIR, "snapshots")
    assert os.path.exists(csv_path)
    df = pd.read_csv(csv_path)
    assert list(df.columns) == ["replica", "W", "D"]
    assert df["W"].iloc[1] == 1.0 / 3.0
    assert df["D"].iloc[1] == 2.5e-17


def test_export_csv_creates_directory():
    nested = os.path.join(EXPORT_DIR, "x1")
    csv_path = ExporterTool.export_csv(pd.DataFrame({"y": [1.0]}), nested, "tail")
    assert csv_path == os.path.join(nested, "tail.csv")


def test_export_csv_invalid_filename():
    with pytest.raises(ValueError, match="File name must be a non-empty string"):
        ExporterTool.export_csv(pd.DataFrame({"y": [1.0]}), EXPORT_DIR, "")


def test_export_json_adds_schema_version():
    result = StageResult(stage="simulate", ok=True, summary={"W": 0.5})
    json_path = ExporterTool.export_json(result, EXPORT_DIR, "summary")
    with open(json_path) as f:
        document = json.load(f)
    assert document["schema_version"] == JSON_SCHEMA_VERSION
    assert document["stage"] == "simulate"
    assert document["summary"] == {"W": 0.5}


def test_export_json_accepts_dicts():
    json_path = ExporterTool.export_json({"b": 2, "a": 1}, EXPORT_DIR, "plain")
    with open(json_path) as f:
        text = f.read()
    assert text.index('"a"') < text.index('"b"')


def test_export_json_invalid_filename():
    with pytest.raises(ValueError, match="File name must be a non-empty string"):
        ExporterTool.export_json({}, EXPORT_DIR, None)


def test_read_samples_round_trip():
    frame = pd.DataFrame({"D_trunc": [0.25, 1.5, 3.0], "alive": [1, 2, 3]})
    csv_path = ExporterTool.export_csv(frame, EXPORT_DIR, "samples")
    assert ExporterTool.read_samples(csv_path, "D_trunc") == [0.25, 1.5, 3.0]


def test_read_samples_errors():
    with pytest.raises(ConfigError, match="not found"):
        ExporterTool.read_samples(os.path.join(EXPORT_DIR, "missing.csv"), "W")
    csv_path = ExporterTool.export_csv(pd.DataFrame({"W": ["a", "b"]}), EXPORT_DIR, "text")
    with pytest.raises(ConfigError, match="not in"):
        ExporterTool.read_samples(csv_path, "D")
    with pytest.raises(ConfigError, match="no numeric values"):
        ExporterTool.read_samples(csv_path, "W")
