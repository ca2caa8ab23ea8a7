import json
import os
from typing import Any, Dict, List

import pandas as pd
from pydantic import BaseModel

from app.brw.errors import ConfigError

CSV_SCHEMA_VERSION = 1
JSON_SCHEMA_VERSION = 1
FLOAT_FORMAT = "%.17g"


class ExporterTool:
    """Tool for writing experiment CSVs and JSON summaries in full precision."""

    @staticmethod
    def export_csv(frame: pd.DataFrame, output_dir: str, name: str) -> str:
        """
        Write a DataFrame to ``<output_dir>/<name>.csv``.

        Args:
            frame: Rows in their public column order.
            output_dir: Target directory, created if needed.
            name: File stem.

        Returns:
            Path to the saved CSV file.

        Raises:
            ValueError: If name is empty.
            OSError: If file writing fails.
        """
        if not name or not isinstance(name, str):
            raise ValueError("File name must be a non-empty string")
        os.makedirs(output_dir, exist_ok=True)
        csv_file = os.path.join(output_dir, f"{name}.csv")
        try:
            frame.to_csv(csv_file, index=False, float_format=FLOAT_FORMAT)
            return csv_file
        except OSError as e:
            raise OSError(f"Failed to write CSV file: {e}")

    @staticmethod
    def export_json(payload: BaseModel | Dict[str, Any], output_dir: str, name: str) -> str:
        """
        Write a schema-versioned JSON summary to ``<output_dir>/<name>.json``.

        Raises:
            ValueError: If name is empty.
            OSError: If file writing fails.
        """
        if not name or not isinstance(name, str):
            raise ValueError("File name must be a non-empty string")
        body = payload.model_dump(mode="json") if isinstance(payload, BaseModel) else dict(payload)
        document = {"schema_version": JSON_SCHEMA_VERSION, **body}
        os.makedirs(output_dir, exist_ok=True)
        json_file = os.path.join(output_dir, f"{name}.json")
        try:
            with open(json_file, "w") as f:
                json.dump(document, f, indent=2, sort_keys=True)
            return json_file
        except OSError as e:
            raise OSError(f"Failed to write JSON file: {e}")

    @staticmethod
    def read_samples(path: str, column: str) -> List[float]:
        """
        Read one numeric column of a CSV written by the harness.

        Raises:
            ConfigError: If the file or column does not exist or is not numeric.
        """
        if not os.path.exists(path):
            raise ConfigError(f"Input file not found: {path}")
        try:
            frame = pd.read_csv(path)
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            raise ConfigError(f"Failed to read CSV {path}: {e}")
        if column not in frame.columns:
            raise ConfigError(f"Column {column!r} not in {path}; have {list(frame.columns)}")
        values = pd.to_numeric(frame[column], errors="coerce")
        if values.isna().all():
            raise ConfigError(f"Column {column!r} of {path} has no numeric values")
        return values.dropna().astype(float).tolist()
