import gzip
import json
import os

import pytest
import torch

from sgdiff.core.denoiser import DenoiserConfig, ScoreNetwork, state_to_document
from sgdiff.core.elements import TypeVocabulary
from sgdiff.core.initializer import init_workspace
from sgdiff.core.retriever import load_artifact, load_manifest, load_stored_checkpoint, resolve_run_id
from sgdiff.core.storage import (
    blob_path,
    canonical_json,
    gzip_bytes,
    load_config,
    prune_unreferenced,
    read_blob,
    store_document,
    store_run,
    trim_manifests,
    write_manifest,
)
from sgdiff.core.utils import StoreError


@pytest.fixture
def workspace(tmp_path):
    """Initialized workspace root."""
    init_workspace(tmp_path)
    return tmp_path


def test_init_workspace_creates_store(tmp_path):
    ws = init_workspace(tmp_path)
    for sub in ("objects", "manifests", "cache"):
        assert (ws / sub).is_dir()
    config = load_config(tmp_path)
    assert config["runs"]["latest"] is None
    assert config["storage"]["compression"] == "gzip"

    config["run"]["seed"] = 42
    (ws / "config.json").write_text(json.dumps(config), encoding="utf-8")
    init_workspace(tmp_path)
    assert load_config(tmp_path)["run"]["seed"] == 42, "re-init must keep an existing config"


def test_load_config_needs_init(tmp_path):
    with pytest.raises(StoreError, match="sgdiff init"):
        load_config(tmp_path)


def test_blobs_are_content_addressed(tmp_path):
    objects = tmp_path / "objects"
    doc = {"b": [1.5, 2.0], "a": "x"}
    digest = store_document(doc, objects)
    assert store_document({"a": "x", "b": [1.5, 2.0]}, objects) == digest
    path = blob_path(digest, objects)
    assert path.parent.name == digest[:2]
    assert path.name == f"{digest[2:]}.json.gz"
    assert read_blob(digest, objects) == canonical_json(doc) == b'{"a":"x","b":[1.5,2.0]}'
    assert gzip.decompress(path.read_bytes()) == canonical_json(doc)
    assert gzip_bytes(b"same") == gzip_bytes(b"same")
    with pytest.raises(StoreError, match="blob not found"):
        read_blob("00" * 32, objects)
    with pytest.raises(ValueError):
        canonical_json({"x": float("nan")})


def test_store_run_records_latest(workspace):
    run_id = store_run({"summary": {"samples": 2}, "trace": [1, 2, 3]}, workspace, "sample")
    assert run_id.startswith("sample-")
    runs = load_config(workspace)["runs"]
    assert runs["latest"] == runs["latest_sample"] == run_id

    manifest = load_manifest(workspace)
    assert manifest["run_id"] == run_id
    assert manifest["meta"] == {"kind": "sample"}
    assert set(manifest["artifacts"]) == {"summary", "trace"}
    assert load_artifact(workspace, "trace") == [1, 2, 3]
    assert load_artifact(workspace, "summary", run_id) == {"samples": 2}
    with pytest.raises(StoreError, match="has no artifact"):
        load_artifact(workspace, "checkpoint")


def test_resolve_run_id(workspace):
    assert resolve_run_id(workspace, "train-20260101-000000-abcdef12") == "train-20260101-000000-abcdef12"
    with pytest.raises(StoreError, match="latest_train"):
        resolve_run_id(workspace, "latest_train")
    with pytest.raises(StoreError, match="Manifest file not found"):
        load_manifest(workspace, "sample-missing")


def test_prune_unreferenced(tmp_path):
    objects, manifests = tmp_path / "objects", tmp_path / "manifests"
    manifests.mkdir()
    kept = store_document({"keep": True}, objects)
    dropped = store_document({"keep": False}, objects)
    write_manifest("run-a", {"doc": kept}, manifests)
    assert prune_unreferenced(objects, manifests) == 1
    assert blob_path(kept, objects).exists()
    assert not blob_path(dropped, objects).exists()
    assert not blob_path(dropped, objects).parent.exists() or dropped[:2] == kept[:2]


def test_trim_manifests_keeps_newest(tmp_path):
    for i in range(4):
        path = write_manifest(f"run-{i}", {}, tmp_path)
        os.utime(path, (1000 + i, 1000 + i))
    trim_manifests(tmp_path, keep=2)
    assert sorted(p.stem for p in tmp_path.glob("*.json")) == ["run-2", "run-3"]


def test_housekeeping_bounds_the_store(workspace):
    for i in range(7):
        store_run({"value": {"i": i}}, workspace, "sample")
    manifests = list((workspace / ".sgdiff" / "manifests").glob("*.json"))
    blobs = list((workspace / ".sgdiff" / "objects").glob("*/*.json.gz"))
    assert len(manifests) == 5
    assert len(blobs) == 5


def test_stored_checkpoint_round_trip(workspace):
    network = ScoreNetwork(DenoiserConfig(n_types=2, layers=1, hidden=8, fourier=4, time_dim=4), seed=3).eval()
    vocabulary = TypeVocabulary(("O", "Zn"))
    run_id = store_run({"checkpoint": state_to_document(network, vocabulary)}, workspace, "train")
    assert load_config(workspace)["runs"]["latest_train"] == run_id

    loaded, loaded_vocabulary = load_stored_checkpoint(workspace)
    assert loaded_vocabulary == vocabulary
    for (name, a), (_, b) in zip(network.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), name
