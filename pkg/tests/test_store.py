import pytest
import os
import math
from app.brw.model import Family, Regime, calibrate, model_hash
from app.brw.walk import exact_lattice_renewal, renewal_eval, step_law
from app.harness.store import (
    load_index,
    load_renewal,
    renewal_key,
    renewal_path,
    save_index_entry,
    save_renewal,
)


@pytest.fixture
def lattice_table():
    return exact_lattice_renewal(step_law(calibrate(Family.LATTICE_BINARY, {}, Regime.BOUNDARY)), 10.0)


def test_renewal_key_depends_on_model_and_walk():
    lattice = model_hash(calibrate(Family.LATTICE_BINARY, {}, Regime.BOUNDARY))
    gaussian = model_hash(calibrate(Family.GAUSSIAN_BINARY, {}, Regime.BOUNDARY))
    walk = {"u_max": 15.0, "spacing": 0.05}
    assert renewal_key(lattice, walk) == renewal_key(lattice, dict(walk))
    assert renewal_key(lattice, walk) != renewal_key(gaussian, walk)
    assert renewal_key(lattice, walk) != renewal_key(lattice, {**walk, "u_max": 20.0})


def test_save_and_load_renewal(tmp_path, lattice_table):
    digest = save_renewal(str(tmp_path), "abc", lattice_table, {"model_hash": "m"})
    loaded = load_renewal(str(tmp_path), "abc")
    assert loaded is not None
    table, loaded_digest = loaded
    assert loaded_digest == digest
    assert renewal_eval(table, 3 * math.acosh(2.0)) == pytest.approx(4.0)
    entry = load_index(str(tmp_path))["abc"]
    assert entry["hash"] == digest
    assert entry["model_hash"] == "m"
    assert entry["exact"] is True


def test_load_missing_renewal(tmp_path):
    assert load_renewal(str(tmp_path), "nothing") is None


def test_corrupt_renewal_is_ignored(tmp_path):
    path = renewal_path(str(tmp_path), "bad")
    os.makedirs(os.path.dirname(path))
    with open(path, "w") as f:
        f.write("x,y\n1,2\n")
    assert load_renewal(str(tmp_path), "bad") is None


def test_load_index_corrupt_file(tmp_path):
    with open(tmp_path / "index.json", "w") as f:
        f.write("{not json")
    assert load_index(str(tmp_path)) == {}


def test_save_index_entry_replaces(tmp_path):
    save_index_entry(str(tmp_path), "k", {"v": 1})
    save_index_entry(str(tmp_path), "k", {"v": 2})
    save_index_entry(str(tmp_path), "other", {"v": 3})
    index = load_index(str(tmp_path))
    assert index == {"k": {"v": 2}, "other": {"v": 3}}


def test_save_index_entry_invalid_entry(tmp_path):
    with pytest.raises(ValueError, match="Failed to save index"):
        save_index_entry(str(tmp_path), "k", {"v": object()})
