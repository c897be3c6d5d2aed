"""
Module: sgdiff.core.storage

Content-addressable storage of run artifacts (checkpoints, loss traces, sample sets,
score-weight tables) in ".sgdiff/objects" with per-run manifests in ".sgdiff/manifests".
It serializes artifacts to canonical JSON, writes run manifests, updates config, and
performs housekeeping.

Exports:
- canonical_json(obj) -> bytes
- gzip_bytes(data) -> bytes
- compute_digest(data) -> str
- write_blob(digest, data, objects_dir) / read_blob(digest, objects_dir)
- store_document(doc, objects_dir) -> str
- write_manifest(run_id, artifacts, manifests_dir, meta)
- prune_unreferenced(objects_dir, manifests_dir) / trim_manifests(manifests_dir, keep)
- store_run(artifacts, workspace_root, kind) -> str
"""

import gzip
import hashlib
import io
import json
import logging
import tempfile
import time
from pathlib import Path
from typing import Any, Dict, Optional

from sgdiff.core.utils import WORKSPACE_DIRNAME, StoreError

logger = logging.getLogger(__name__)

BLOB_SUFFIX = ".json.gz"


def load_config(workspace_root: Path) -> Dict[str, Any]:
    config_path = workspace_root / WORKSPACE_DIRNAME / "config.json"
    if not config_path.exists():
        raise StoreError(f"no config at {config_path}; run `sgdiff init` first")
    with config_path.open("r", encoding="utf-8") as f:
        return json.load(f)


def save_config(config: Dict[str, Any], workspace_root: Path) -> None:
    config_path = workspace_root / WORKSPACE_DIRNAME / "config.json"
    temp_path = config_path.with_suffix(".tmp")
    with temp_path.open("w", encoding="utf-8") as f:
        json.dump(config, f, indent=4)
    temp_path.replace(config_path)


def ensure_dirs(*dirs: Path) -> None:
    for directory in dirs:
        directory.mkdir(parents=True, exist_ok=True)


def canonical_json(obj: Any) -> bytes:
    """Sorted keys, compact separators, shortest round-trip floats; NaN is rejected."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def gzip_bytes(data: bytes) -> bytes:
    """Deterministic gzip: no file name and mtime 0, so equal input gives equal bytes."""
    buffer = io.BytesIO()
    with gzip.GzipFile(filename="", mode="wb", fileobj=buffer, mtime=0) as gz:
        gz.write(data)
    return buffer.getvalue()


def compute_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def blob_path(digest: str, objects_dir: Path) -> Path:
    return objects_dir / digest[:2] / f"{digest[2:]}{BLOB_SUFFIX}"


def write_blob(digest: str, data: bytes, objects_dir: Path) -> Path:
    path = blob_path(digest, objects_dir)
    if path.exists():
        return path
    path.parent.mkdir(parents=True, exist_ok=True)
    # Atomic write via temp file
    with tempfile.NamedTemporaryFile(dir=path.parent, delete=False) as tmpf:
        tmpf.write(gzip_bytes(data))
    Path(tmpf.name).replace(path)
    return path


def read_blob(digest: str, objects_dir: Path) -> bytes:
    path = blob_path(digest, objects_dir)
    if not path.exists():
        raise StoreError(f"blob not found: {path}")
    with gzip.open(path, "rb") as gz:
        return gz.read()


def store_document(doc: Any, objects_dir: Path) -> str:
    data = canonical_json(doc)
    digest = compute_digest(data)
    write_blob(digest, data, objects_dir)
    return digest


def write_manifest(
    run_id: str,
    artifacts: Dict[str, str],
    manifests_dir: Path,
    meta: Optional[Dict[str, Any]] = None,
) -> Path:
    manifest_path = manifests_dir / f"{run_id}.json"
    temp_path = manifest_path.with_suffix(".tmp")
    manifest = {"run_id": run_id, "artifacts": artifacts, "meta": meta or {}}
    with temp_path.open("w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    temp_path.replace(manifest_path)
    return manifest_path


def prune_unreferenced(objects_dir: Path, manifests_dir: Path, keep: Optional[set] = None) -> int:
    """Delete blobs no manifest references (plus any digests in `keep`); returns the count."""
    referenced: set = set(keep or ())
    for mf in manifests_dir.glob("*.json"):
        try:
            mdata = json.loads(mf.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            logger.warning("Skipping unreadable manifest %s", mf)
            continue
        referenced.update(mdata.get("artifacts", {}).values())
    removed = 0
    if not objects_dir.exists():
        return removed
    for prefix in objects_dir.iterdir():
        if not prefix.is_dir() or len(prefix.name) != 2:
            continue
        for blob_file in prefix.glob(f"*{BLOB_SUFFIX}"):
            digest = prefix.name + blob_file.name[: -len(BLOB_SUFFIX)]
            if digest not in referenced:
                blob_file.unlink()
                removed += 1
        if not any(prefix.iterdir()):
            prefix.rmdir()
    if removed:
        logger.info("Pruned %d unreferenced blobs from %s", removed, objects_dir)
    return removed


def trim_manifests(manifests_dir: Path, keep: int) -> None:
    files = sorted(manifests_dir.glob("*.json"), key=lambda p: (p.stat().st_mtime, p.name), reverse=True)
    for old in files[keep:]:
        old.unlink()
        logger.info("Removed old manifest %s", old.name)


def workspace_dirs(cfg: Dict[str, Any], workspace_root: Path) -> Dict[str, Path]:
    storage_cfg = cfg.get("storage", {})
    return {
        "objects": workspace_root / storage_cfg.get("objects_dir", f"{WORKSPACE_DIRNAME}/objects"),
        "manifests": workspace_root / storage_cfg.get("manifests_dir", f"{WORKSPACE_DIRNAME}/manifests"),
        "cache": workspace_root / storage_cfg.get("cache_dir", f"{WORKSPACE_DIRNAME}/cache"),
    }


def store_run(artifacts: Dict[str, Any], workspace_root: Path, kind: str) -> str:
    """
    Store the artifacts of one run into the .sgdiff store:
      - Serializes each artifact to canonical JSON, hashes & compresses to objects/
      - Writes a manifest mapping artifact names to digests
      - Records the run as the latest of its kind in config.json
      - Performs housekeeping (prune & trim)

    Args:
        artifacts (Dict[str, Any]): JSON-serializable documents keyed by artifact name.
        workspace_root (Path): Directory holding `.sgdiff/`.
        kind (str): Run kind ("train", "sample", "csp").

    Returns:
        str: The run id.
    """
    cfg = load_config(workspace_root)
    hk_cfg = cfg.get("housekeeping", {})
    dirs = workspace_dirs(cfg, workspace_root)
    ensure_dirs(dirs["objects"], dirs["manifests"])

    digests = {name: store_document(doc, dirs["objects"]) for name, doc in artifacts.items()}
    stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
    run_id = f"{kind}-{stamp}-{compute_digest(canonical_json(digests))[:8]}"
    write_manifest(run_id, digests, dirs["manifests"], meta={"kind": kind})
    logger.info("Stored %s run %s (%d artifacts)", kind, run_id, len(digests))

    runs = cfg.setdefault("runs", {})
    runs["latest"] = run_id
    runs[f"latest_{kind}"] = run_id
    save_config(cfg, workspace_root)

    if hk_cfg.get("keep_last_manifests"):
        keep = hk_cfg["keep_last_manifests"]
        if isinstance(keep, int) and keep > 0:
            trim_manifests(dirs["manifests"], keep)
    if hk_cfg.get("prune_unreferenced", False):
        prune_unreferenced(dirs["objects"], dirs["manifests"])
    return run_id
