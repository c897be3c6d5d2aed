"""
Module: sgdiff.core.retriever

Provides retrieval functions for loading run artifacts (checkpoints, loss traces,
sample sets) from the .sgdiff content-addressable store and per-run manifests.

Exports:
- load_manifest(workspace_root: Path, run_id: str = "latest") -> Dict[str, Any]
- load_blob(digest: str, workspace_root: Path) -> Any
- load_artifact(workspace_root: Path, name: str, run_id: str = "latest") -> Any
- load_stored_checkpoint(workspace_root: Path, run_id: str = "latest_train")
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Tuple

from sgdiff.core.denoiser import ScoreNetwork, state_from_document
from sgdiff.core.elements import TypeVocabulary
from sgdiff.core.storage import load_config, read_blob, workspace_dirs
from sgdiff.core.utils import StoreError

logger = logging.getLogger(__name__)


def resolve_run_id(workspace_root: Path, run_id: str = "latest") -> str:
    """Map "latest" / "latest_<kind>" to the run id recorded in config.json."""
    if not run_id.startswith("latest"):
        return run_id
    cfg = load_config(workspace_root)
    resolved = cfg.get("runs", {}).get(run_id)
    if not resolved:
        raise StoreError(f"no run recorded as {run_id!r} in config.json; run `sgdiff train` or `sgdiff sample` first")
    return resolved


def load_manifest(workspace_root: Path, run_id: str = "latest") -> Dict[str, Any]:
    """
    Load the manifest of a run from .sgdiff/manifests.

    Returns the manifest with `run_id`, `artifacts` (name -> digest) and `meta`.
    """
    cfg = load_config(workspace_root)
    manifest_dir = workspace_dirs(cfg, workspace_root)["manifests"]
    run_id = resolve_run_id(workspace_root, run_id)
    manifest_path = manifest_dir / f"{run_id}.json"
    if not manifest_path.exists():
        raise StoreError(f"Manifest file not found: {manifest_path}")

    with manifest_path.open("r", encoding="utf-8") as f:
        return json.load(f)


def load_blob(digest: str, workspace_root: Path) -> Any:
    """
    Given a blob digest, load and return its JSON content from .sgdiff/objects.
    """
    cfg = load_config(workspace_root)
    objects_dir = workspace_dirs(cfg, workspace_root)["objects"]
    return json.loads(read_blob(digest, objects_dir))


def load_artifact(workspace_root: Path, name: str, run_id: str = "latest") -> Any:
    manifest = load_manifest(workspace_root, run_id)
    digest = manifest.get("artifacts", {}).get(name)
    if digest is None:
        raise StoreError(f"run {manifest.get('run_id')} has no artifact {name!r}")
    return load_blob(digest, workspace_root)


def load_stored_checkpoint(workspace_root: Path, run_id: str = "latest_train") -> Tuple[ScoreNetwork, TypeVocabulary]:
    run_id = resolve_run_id(workspace_root, run_id)
    logger.info("Loading checkpoint of run %s", run_id)
    return state_from_document(load_artifact(workspace_root, "checkpoint", run_id), f"run {run_id}")
