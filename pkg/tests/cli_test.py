import json

import numpy as np
import pytest

from sgdiff.cli import main
from sgdiff.core.crystal import Crystal
from sgdiff.core.documents import read_crystal, write_crystal
from sgdiff.core.storage import load_config

from tests.conftest import TOY_DIR, rock_salt, wurtzite

RULE = "-" * 40


def printed_block(text: str) -> dict:
    """JSON payload printed between the first two rules."""
    lines = text.splitlines()
    start = lines.index(RULE)
    end = lines.index(RULE, start + 1)
    return json.loads("\n".join(lines[start + 1 : end]))


@pytest.fixture
def cwd(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def test_init(cwd, capsys):
    main(["init"])
    assert "Created" in capsys.readouterr().out
    assert (cwd / ".sgdiff" / "config.json").exists()
    assert (cwd / ".sgdiff" / "objects").is_dir()


def test_encode_reports_families(cwd, capsys):
    (cwd / "cell.txt").write_text("4 0 0\n0 4 0\n0 0 4\n", encoding="utf-8")
    main(["encode", "cell.txt"])
    payload = printed_block(capsys.readouterr().out)
    assert payload["k"][:5] == pytest.approx([0.0] * 5, abs=1e-12)
    assert payload["k"][5] == pytest.approx(np.log(4.0))
    assert "cubic" in payload["compatible_families"]
    assert payload["constraints"]["cubic"] is True
    assert payload["round_trip_error"] < 1e-10


def test_oracle_sampling_writes_samples(cwd, small_config, capsys):
    write_crystal(wurtzite(), cwd / "zno.json", name="ZnO")
    main(["--config", str(small_config), "sample", "--oracle", "zno.json", "-n", "2", "-o", "out", "--record-every", "10"])
    summary = json.loads((cwd / "out" / "summary.json").read_text(encoding="utf-8"))
    assert summary["samples"] == 2
    assert summary["match_rate"] == 1.0
    assert summary["validity_fraction"] == 1.0
    sample = read_crystal(cwd / "out" / "sample_001.json")
    assert sample.group == 186
    assert sample.composition() == {"Zn": 2, "O": 2}
    assert (cwd / "out" / "trajectory_000.json").exists()
    assert "Wrote 2 samples" in capsys.readouterr().out


def test_train_then_sample_from_store(cwd, small_config, capsys):
    main(["init"])
    main(["--config", str(small_config), "train", "--dataset", str(TOY_DIR / "train"), "--epochs", "1", "-o", "ckpt.json.gz"])
    payload = printed_block(capsys.readouterr().out)
    assert payload["structures"] == 5
    assert payload["steps"] == 1
    assert (cwd / "ckpt.json.gz").exists()
    assert load_config(cwd)["runs"]["latest_train"] == payload["run_id"]

    main([
        "--config", str(small_config), "sample", "--from-store", "--group", "225",
        "--wyckoff", "a,b", "--species", "Na,Cl", "-o", "out",
    ])
    sample = read_crystal(cwd / "out" / "sample_000.json")
    assert sample.group == 225
    assert sample.composition() == {"Na": 4, "Cl": 4}
    assert load_config(cwd)["runs"]["latest"].startswith("sample-")


def test_match_files_and_directories(cwd, capsys):
    crystal = rock_salt()
    moved = Crystal(crystal.species, crystal.frac_coords + 0.25, crystal.lattice)
    write_crystal(crystal, cwd / "ref" / "NaCl.json")
    write_crystal(moved, cwd / "pred" / "NaCl.json")
    write_crystal(wurtzite(), cwd / "ref" / "ZnO.json")
    write_crystal(rock_salt(4.5, "Zn", "O"), cwd / "pred" / "ZnO.json")

    main(["match", "pred/NaCl.json", "ref/NaCl.json"])
    payload = printed_block(capsys.readouterr().out)
    assert payload["matched"] is True
    assert payload["rmsd"] == pytest.approx(0.0, abs=1e-8)

    main(["match", "pred", "ref", "--report", "report.tsv"])
    out = capsys.readouterr().out
    assert "pairs: 2" in out
    assert "match rate: 0.5000" in out
    assert (cwd / "report.tsv").read_text(encoding="utf-8").splitlines()[0] == "name\tmatched\trmsd"


def test_validate_with_reference(cwd, capsys):
    write_crystal(rock_salt(), cwd / "good" / "a.json")
    crowded = Crystal(["Na", "Na"], [[0.0, 0.0, 0.0], [0.01, 0.0, 0.0]], 4.0 * np.eye(3))
    write_crystal(crowded, cwd / "good" / "b.json")
    main(["validate", "good", "--reference", str(TOY_DIR / "train")])
    out = capsys.readouterr().out
    assert "\tvalid" in out and "\tinvalid" in out
    payload = json.loads(out[out.rindex(RULE) + len(RULE):])
    assert payload["files"] == 2
    assert payload["validity_fraction"] == 0.5
    assert payload["w1_density"] >= 0.0


def test_csp_with_oracle_refinement(cwd, small_config, capsys):
    main(["--config", str(small_config), "csp", "--oracle", "--report", "csp.tsv"])
    out = capsys.readouterr().out
    assert "Template-based prediction:" in out
    rows = (cwd / "csp.tsv").read_text(encoding="utf-8").splitlines()
    assert rows[0] == "name\tmatched\trmsd"
    assert len(rows) == 6
    assert next(row for row in rows if row.startswith("KCl\t")).split("\t")[1] == "1"
    assert "template=NaCl" in out


def test_export_cif(cwd, capsys):
    write_crystal(rock_salt(), cwd / "nacl.json")
    main(["export", "nacl.json"])
    assert (cwd / "nacl.cif").read_text(encoding="utf-8").startswith("data_nacl\n")
    assert "Wrote nacl.cif" in capsys.readouterr().out


def test_usage_errors_exit_with_two(cwd):
    with pytest.raises(SystemExit) as exc:
        main(["sample", "--group", "225"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["--jobs", "0", "encode", "cell.txt"])
    assert exc.value.code == 2


def test_domain_errors_exit_with_one(cwd, small_config, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["match", "missing.json", "other.json"])
    assert exc.value.code == 1
    assert "file not found" in capsys.readouterr().err

    with pytest.raises(SystemExit) as exc:
        main(["--config", str(small_config), "sample", "--from-store"])
    assert exc.value.code == 1
    assert "sgdiff init" in capsys.readouterr().err


def test_debug_table_needs_dev_mode(cwd, monkeypatch, capsys):
    monkeypatch.delenv("SGDIFF_DEV_MODE", raising=False)
    with pytest.raises(SystemExit) as exc:
        main(["debug-table", "225"])
    assert exc.value.code == 1
    assert "development purposes" in capsys.readouterr().err

    monkeypatch.setenv("SGDIFF_DEV_MODE", "1")
    main(["debug-table", "225"])
    payload = printed_block(capsys.readouterr().out)
    assert payload["order"] == 192
    assert payload["family"] == "cubic"


@pytest.fixture
def refine_config(small_config):
    """The short CLI config with run.mode set to refine."""
    doc = json.loads(small_config.read_text(encoding="utf-8"))
    doc["run"] = {"mode": "refine"}
    path = small_config.with_name("refine.json")
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def test_refine_mode_pulls_template_onto_target(cwd, refine_config, capsys):
    write_crystal(wurtzite(), cwd / "zno.json", name="ZnO")
    write_crystal(wurtzite(z=0.36), cwd / "guess.json", name="guess")
    main([
        "--config", str(refine_config), "sample", "--oracle", "zno.json", "--template", "guess.json",
        "-n", "2", "-o", "out", "--t-start", "10",
    ])
    payload = printed_block(capsys.readouterr().out)
    assert payload["mode"] == "refine"
    assert payload["template"] == "guess.json"
    assert payload["match_rate"] == 1.0
    sample = read_crystal(cwd / "out" / "sample_000.json")
    assert sample.group == 186
    assert sample.annotation.basic_coords[1, 2] == pytest.approx(0.382, abs=1e-6)


def test_refine_mode_needs_a_template(cwd, refine_config, capsys):
    write_crystal(wurtzite(), cwd / "zno.json")
    with pytest.raises(SystemExit) as exc:
        main(["--config", str(refine_config), "sample", "--oracle", "zno.json"])
    assert exc.value.code == 1
    assert "--template" in capsys.readouterr().err
