import hashlib
import json
import logging
import os
from typing import Dict, Tuple

import pandas as pd

from app.brw.walk import RenewalTable

logger = logging.getLogger(__name__)

INDEX_FILE = "index.json"
RENEWAL_DIR = "renewal"


def renewal_key(model_hash: str, walk_params: Dict) -> str:
    """Content address of a renewal table: the model hash plus the walk block."""
    text = json.dumps({"model": model_hash, "walk": walk_params}, sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _index_path(output_dir: str) -> str:
    return os.path.join(output_dir, INDEX_FILE)


def renewal_path(output_dir: str, key: str) -> str:
    return os.path.join(output_dir, RENEWAL_DIR, f"{key}.csv")


def load_index(output_dir: str) -> Dict:
    """Load the run index from a JSON file."""
    path = _index_path(output_dir)
    if not os.path.exists(path):
        return {}
    try:
        with open(path, "r") as f:
            return json.load(f)
    except (json.JSONDecodeError, IOError):
        return {}


def save_index_entry(output_dir: str, key: str, entry: Dict) -> None:
    """Add or replace one entry of the run index."""
    try:
        os.makedirs(output_dir, exist_ok=True)
        index = load_index(output_dir)
        index[key] = entry
        with open(_index_path(output_dir), "w") as f:
            json.dump(index, f, indent=2, sort_keys=True)
    except (TypeError, IOError) as e:
        raise ValueError(f"Failed to save index: {e}")


def file_hash(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()[:16]


def load_renewal(output_dir: str, key: str) -> Tuple[RenewalTable, str] | None:
    """Reload a cached renewal table and its file hash; None when missing or corrupt."""
    path = renewal_path(output_dir, key)
    if not os.path.exists(path):
        return None
    try:
        table = RenewalTable.from_frame(pd.read_csv(path))
    except (ValueError, IOError, IndexError, KeyError, pd.errors.ParserError) as e:
        logger.warning(f"Ignoring corrupt renewal table {path}: {e}")
        return None
    return table, file_hash(path)


def save_renewal(output_dir: str, key: str, table: RenewalTable, meta: Dict | None = None) -> str:
    """Persist a renewal table under its content address and index it.

    Returns:
        Hash of the written CSV file.

    Raises:
        ValueError: If the table or index cannot be written.
    """
    path = renewal_path(output_dir, key)
    try:
        os.makedirs(os.path.dirname(path), exist_ok=True)
        table.to_frame().to_csv(path, index=False, float_format="%.17g")
    except OSError as e:
        raise ValueError(f"Failed to save renewal table: {e}")
    digest = file_hash(path)
    entry = {"kind": "renewal", "path": path, "hash": digest, "exact": table.exact}
    entry.update(meta or {})
    save_index_entry(output_dir, key, entry)
    logger.info(f"Saved renewal table {key} ({table.grid.size} nodes)")
    return digest
