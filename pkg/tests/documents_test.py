import json

import numpy as np
import pytest

from sgdiff.core.documents import (
    crystal_from_document,
    crystal_to_cif,
    crystal_to_document,
    read_crystal,
    read_dataset,
    read_lattice,
    write_cif,
    write_crystal,
    write_trajectory,
)
from sgdiff.core.utils import DocumentError

from tests.conftest import TOY_DIR, pnma_4c, rock_salt


def test_annotated_round_trip_is_byte_identical(tmp_path):
    """write -> read -> write gives the same bytes for annotated crystals."""
    for i, crystal in enumerate((rock_salt(), pnma_4c())):
        first = write_crystal(crystal, tmp_path / f"a{i}.json", name="x")
        second = write_crystal(read_crystal(first), tmp_path / f"b{i}.json", name="x")
        assert first.read_bytes() == second.read_bytes()
        assert first.read_text(encoding="utf-8").endswith("}\n")


def test_plain_round_trip(tmp_path):
    crystal = rock_salt().without_annotation()
    loaded = read_crystal(write_crystal(crystal, tmp_path / "p1.json"))
    assert loaded.annotation is None
    assert loaded.species == crystal.species
    assert np.array_equal(loaded.frac_coords, crystal.frac_coords)
    assert np.array_equal(loaded.lattice, crystal.lattice)


def test_document_layout():
    doc = crystal_to_document(rock_salt(), name="NaCl")
    assert doc["schema"] == "sgdiff-crystal" and doc["version"] == 1
    assert doc["group"] == 225
    assert doc["sites"][1] == {"element": "Cl", "wyckoff": "b", "coords": [0.5, 0.5, 0.5]}
    assert len(doc["atoms"]) == 8
    assert doc["atoms"][4]["site"] == 1
    assert doc["lattice"]["vectors"][0] == [5.64, 0.0, 0.0]


def test_toy_documents_load():
    crystal = read_crystal(TOY_DIR / "templates" / "NaCl.json")
    assert crystal.num_atoms == 8 and crystal.group == 225
    names = [name for name, _ in read_dataset(TOY_DIR / "targets")]
    assert names == sorted(names)
    assert "GaN" in names
    with pytest.raises(DocumentError, match="not a directory"):
        read_dataset(TOY_DIR / "missing")


def test_sites_only_and_k_lattice():
    doc = {
        "schema": "sgdiff-crystal",
        "version": 1,
        "group": 225,
        "lattice": {"k": [0, 0, 0, 0, 0, float(np.log(4.0))]},
        "sites": [{"element": "Cu", "wyckoff": "a", "coords": [0, 0, 0]}],
    }
    crystal = crystal_from_document(doc)
    assert crystal.num_atoms == 4
    assert np.allclose(crystal.lattice, 4.0 * np.eye(3))

    bad_k = {**doc, "lattice": {"k": [0.1, 0, 0, 0, 0, 1.0]}}
    with pytest.raises(DocumentError, match="violates"):
        crystal_from_document(bad_k)
    no_group = {key: value for key, value in doc.items() if key not in ("group", "sites")}
    no_group["atoms"] = [{"element": "Cu", "coords": [0, 0, 0]}]
    with pytest.raises(DocumentError, match="group"):
        crystal_from_document(no_group)


def test_inconsistent_atoms_are_rejected():
    doc = crystal_to_document(rock_salt())
    moved = json.loads(json.dumps(doc))
    moved["atoms"][2]["coords"][0] += 0.01
    with pytest.raises(DocumentError, match="differ from the Wyckoff expansion"):
        crystal_from_document(moved, "salt.json")

    swapped = json.loads(json.dumps(doc))
    swapped["atoms"][0]["element"] = "Cl"
    with pytest.raises(DocumentError, match="elements do not match"):
        crystal_from_document(swapped)

    retagged = json.loads(json.dumps(doc))
    retagged["atoms"][0]["site"] = 1
    with pytest.raises(DocumentError, match=r"atoms\[0\]\.site"):
        crystal_from_document(retagged)


def test_schema_and_field_errors_name_the_source():
    doc = crystal_to_document(rock_salt())
    with pytest.raises(DocumentError, match="^salt.json: schema"):
        crystal_from_document({**doc, "schema": "other"}, "salt.json")
    with pytest.raises(DocumentError, match="version"):
        crystal_from_document({**doc, "version": 2})
    with pytest.raises(DocumentError, match="Wyckoff position 'q'"):
        crystal_from_document({**doc, "sites": [{"element": "Na", "wyckoff": "q", "coords": [0, 0, 0]}]})
    with pytest.raises(DocumentError, match=r"lattice\.vectors\[1\]"):
        crystal_from_document({**doc, "lattice": {"vectors": [[1, 0, 0], [0, 1], [0, 0, 1]]}})


def test_invalid_json_reports_position(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{\n  "schema": ,\n}\n', encoding="utf-8")
    with pytest.raises(DocumentError, match=r"broken\.json:2:\d+: invalid JSON"):
        read_crystal(path)
    with pytest.raises(DocumentError, match="file not found"):
        read_crystal(tmp_path / "absent.json")


def test_read_lattice_formats(tmp_path):
    text = tmp_path / "cell.txt"
    text.write_text("3 0 0\n-1.5 2.598 0\n0 0 5\n", encoding="utf-8")
    L = read_lattice(text)
    assert np.allclose(L[:, 1], [-1.5, 2.598, 0.0]), "rows are lattice vectors"

    vectors = tmp_path / "cell.json"
    vectors.write_text(json.dumps({"vectors": [[2, 0, 0], [0, 3, 0], [0, 0, 4]]}), encoding="utf-8")
    assert np.allclose(read_lattice(vectors), np.diag([2.0, 3.0, 4.0]))

    crystal = write_crystal(rock_salt(), tmp_path / "salt.json")
    assert np.allclose(read_lattice(crystal), 5.64 * np.eye(3))

    wrong = tmp_path / "short.txt"
    wrong.write_text("1 0 0\n0 1 0\n", encoding="utf-8")
    with pytest.raises(DocumentError, match="three rows"):
        read_lattice(wrong)


def test_cif_export(tmp_path):
    cif = crystal_to_cif(rock_salt(), "NaCl")
    assert cif.startswith("data_NaCl\n")
    assert "_cell_length_a   5.64\n" in cif
    assert "  Na1  Na  0.0  0.0  0.0  1" in cif
    assert sum(1 for line in cif.splitlines() if line.startswith("  Cl")) == 4
    path = write_cif(rock_salt(), tmp_path / "nacl.cif")
    assert path.read_text(encoding="utf-8").startswith("data_nacl\n")


def test_trajectory_document(tmp_path):
    frames = [rock_salt(5.0), rock_salt(5.5)]
    path = write_trajectory(frames, tmp_path / "traj.json", steps=[10, 0])
    doc = json.loads(path.read_text(encoding="utf-8"))
    assert doc["schema"] == "sgdiff-trajectory"
    assert doc["steps"] == [10, 0]
    assert crystal_from_document(doc["frames"][1]).lattice[0, 0] == 5.5
