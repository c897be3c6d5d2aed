"""
Module: sgdiff.core.documents

Crystal files on disk.

1) Crystal documents (JSON, indent 4, shortest round-trip floats)
   {
       "schema": "sgdiff-crystal", "version": 1, "name": "NaCl",
       "lattice": {"vectors": [[ax, ay, az], [bx, by, bz], [cx, cy, cz]]}   # rows = lattice vectors
                | {"k": [k1, ..., k6]},                                    # needs "group"
       "group": 225,                                                       # optional
       "sites": [{"element": "Na", "wyckoff": "a", "coords": [0, 0, 0]}],  # optional, needs "group"
       "atoms": [{"element": "Na", "coords": [0, 0, 0], "site": 0}]
   }
   - With "sites", the atoms are regenerated from the Wyckoff expansion; an "atoms" list
     that disagrees with that expansion is rejected.
   - Annotated crystals are written in expansion order, so write -> read -> write is
     byte-identical.

2) Lattice files for `sgdiff encode`
   - A crystal document, a JSON object with "vectors" (or "lattice": {...}), or a plain
     text file with three rows of three numbers (one lattice vector per row).

3) Exports
   - `crystal_to_cif` / `write_cif`: minimal P1 CIF (cell parameters + fractional sites).
   - `write_trajectory`: list of crystal documents for recorded sampling states.

Exports:
- `crystal_to_document`, `crystal_from_document`, `read_crystal`, `write_crystal`
- `read_dataset`, `read_lattice`, `crystal_to_cif`, `write_cif`, `write_trajectory`
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from sgdiff.core.crystal import Crystal
from sgdiff.core.lattice import k_satisfies_mask, lattice_from_k, params_from_lattice
from sgdiff.core.spacegroup import expand_structure, get_spacegroup
from sgdiff.core.utils import DocumentError, DomainError, wrap_frac, wrapped_delta

logger = logging.getLogger(__name__)

CRYSTAL_SCHEMA = "sgdiff-crystal"
TRAJECTORY_SCHEMA = "sgdiff-trajectory"
SCHEMA_VERSION = 1
ATOM_TOLERANCE = 1e-6

PathLike = Union[str, Path]


def _floats(value: Any, count: int, where: str) -> List[float]:
    if not isinstance(value, list) or len(value) != count:
        raise DocumentError(f"{where}: expected a list of {count} numbers")
    try:
        out = [float(v) for v in value]
    except (TypeError, ValueError):
        raise DocumentError(f"{where}: expected a list of {count} numbers") from None
    if not np.all(np.isfinite(out)):
        raise DocumentError(f"{where}: non-finite value")
    return out


def _vectors(value: Any, where: str) -> np.ndarray:
    if not isinstance(value, list) or len(value) != 3:
        raise DocumentError(f"{where}: expected three lattice vectors")
    rows = [_floats(row, 3, f"{where}[{i}]") for i, row in enumerate(value)]
    return np.array(rows).T


def crystal_to_document(crystal: Crystal, name: Optional[str] = None) -> Dict[str, Any]:
    doc: Dict[str, Any] = {"schema": CRYSTAL_SCHEMA, "version": SCHEMA_VERSION}
    if name is not None:
        doc["name"] = name
    doc["lattice"] = {"vectors": crystal.lattice.T.tolist()}
    annotation = crystal.annotation
    if annotation is None:
        doc["atoms"] = [
            {"element": element, "coords": coords.tolist()}
            for element, coords in zip(crystal.species, crystal.frac_coords)
        ]
        return doc

    canonical = expand_structure(
        annotation.basic_species, annotation.basic_coords, annotation.letters, crystal.lattice, annotation.group
    )
    doc["group"] = annotation.group
    doc["sites"] = [
        {"element": element, "wyckoff": letter, "coords": coords.tolist()}
        for element, letter, coords in zip(annotation.basic_species, annotation.letters, canonical.annotation.basic_coords)
    ]
    doc["atoms"] = [
        {"element": element, "coords": coords.tolist(), "site": int(site)}
        for element, coords, site in zip(canonical.species, canonical.frac_coords, canonical.annotation.site_index)
    ]
    return doc


def _lattice_from_section(section: Any, group: Optional[int], source: str) -> np.ndarray:
    if not isinstance(section, dict):
        raise DocumentError(f"{source}: lattice: expected an object")
    if "vectors" in section:
        return _vectors(section["vectors"], f"{source}: lattice.vectors")
    if "k" in section:
        k = np.array(_floats(section["k"], 6, f"{source}: lattice.k"))
        if group is None:
            raise DocumentError(f"{source}: lattice.k needs a top-level \"group\"")
        if not k_satisfies_mask(k, get_spacegroup(group).mask):
            raise DocumentError(f"{source}: lattice.k violates the lattice constraints of group {group}")
        return lattice_from_k(k)
    raise DocumentError(f"{source}: lattice: expected \"vectors\" or \"k\"")


def _parse_atoms(atoms: Any, source: str) -> Tuple[List[str], np.ndarray, List[Optional[int]]]:
    if not isinstance(atoms, list) or not atoms:
        raise DocumentError(f"{source}: atoms: expected a nonempty list")
    species, coords, sites = [], [], []
    for i, atom in enumerate(atoms):
        where = f"{source}: atoms[{i}]"
        if not isinstance(atom, dict) or not isinstance(atom.get("element"), str):
            raise DocumentError(f"{where}: expected an object with an \"element\" symbol")
        species.append(atom["element"])
        coords.append(_floats(atom.get("coords"), 3, f"{where}.coords"))
        sites.append(atom.get("site"))
    return species, np.array(coords), sites


def crystal_from_document(doc: Any, source: str = "<document>") -> Crystal:
    """
    Parse a crystal document.

    Raises:
        DocumentError: Wrong schema, malformed fields or atoms inconsistent with the sites,
            always prefixed with `source` and the JSON location.
    """
    if not isinstance(doc, dict):
        raise DocumentError(f"{source}: expected a JSON object")
    if doc.get("schema") != CRYSTAL_SCHEMA:
        raise DocumentError(f"{source}: schema must be {CRYSTAL_SCHEMA!r}, got {doc.get('schema')!r}")
    if doc.get("version") != SCHEMA_VERSION:
        raise DocumentError(f"{source}: unsupported version {doc.get('version')!r}")
    group = doc.get("group")
    if group is not None and (not isinstance(group, int) or isinstance(group, bool)):
        raise DocumentError(f"{source}: group must be an integer")

    try:
        if group is not None:
            get_spacegroup(group)
        lattice = _lattice_from_section(doc.get("lattice"), group, source)

        if "sites" not in doc:
            species, coords, _ = _parse_atoms(doc.get("atoms"), source)
            return Crystal(tuple(species), coords, lattice)

        if group is None:
            raise DocumentError(f"{source}: sites need a top-level \"group\"")
        sites = doc["sites"]
        if not isinstance(sites, list) or not sites:
            raise DocumentError(f"{source}: sites: expected a nonempty list")
        basic_species, letters, basic = [], [], []
        for i, site in enumerate(sites):
            where = f"{source}: sites[{i}]"
            if not isinstance(site, dict) or not isinstance(site.get("element"), str):
                raise DocumentError(f"{where}: expected an object with an \"element\" symbol")
            if not isinstance(site.get("wyckoff"), str):
                raise DocumentError(f"{where}.wyckoff: expected a Wyckoff letter")
            basic_species.append(site["element"])
            letters.append(site["wyckoff"])
            basic.append(_floats(site.get("coords"), 3, f"{where}.coords"))
        crystal = expand_structure(basic_species, np.array(basic), letters, lattice, group)
    except DocumentError:
        raise
    except DomainError as exc:
        raise DocumentError(f"{source}: {exc}") from None

    if "atoms" in doc:
        species, coords, site_tags = _parse_atoms(doc["atoms"], source)
        if tuple(species) != crystal.species:
            raise DocumentError(f"{source}: atoms: elements do not match the Wyckoff expansion of the sites")
        offset = np.abs(wrapped_delta(coords, crystal.frac_coords)).max()
        if offset > ATOM_TOLERANCE:
            raise DocumentError(
                f"{source}: atoms: coordinates differ from the Wyckoff expansion by {offset:.3g}"
            )
        tagged = [(i, s) for i, s in enumerate(site_tags) if s is not None]
        for i, s in tagged:
            if s != int(crystal.annotation.site_index[i]):
                raise DocumentError(f"{source}: atoms[{i}].site: expected {int(crystal.annotation.site_index[i])}")
    return crystal


def _load_json(path: Path) -> Any:
    if not path.exists():
        raise DocumentError(f"file not found: {path}")
    try:
        with path.open("r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise DocumentError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None


def read_crystal(path: PathLike) -> Crystal:
    path = Path(path)
    return crystal_from_document(_load_json(path), str(path))


def write_crystal(crystal: Crystal, path: PathLike, name: Optional[str] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        json.dump(crystal_to_document(crystal, name), f, indent=4)
        f.write("\n")
    return path


def read_dataset(directory: PathLike) -> List[Tuple[str, Crystal]]:
    """Every `*.json` crystal document of a directory as (name, crystal), sorted by file name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DocumentError(f"not a directory: {directory}")
    out = []
    for path in sorted(directory.glob("*.json")):
        doc = _load_json(path)
        name = doc.get("name") if isinstance(doc, dict) and isinstance(doc.get("name"), str) else path.stem
        out.append((name, crystal_from_document(doc, str(path))))
    logger.info("Read %d crystals from %s", len(out), directory)
    return out


def read_lattice(path: PathLike) -> np.ndarray:
    """Lattice matrix (column convention) from a crystal document, a lattice JSON or a 3x3 text file."""
    path = Path(path)
    if not path.exists():
        raise DocumentError(f"file not found: {path}")
    if path.suffix.lower() != ".json":
        try:
            rows = np.loadtxt(path, dtype=float, ndmin=2)
        except ValueError as exc:
            raise DocumentError(f"{path}: cannot parse lattice rows: {exc}") from None
        if rows.shape != (3, 3):
            raise DocumentError(f"{path}: expected three rows of three numbers, got shape {rows.shape}")
        return rows.T
    doc = _load_json(path)
    if isinstance(doc, dict) and doc.get("schema") == CRYSTAL_SCHEMA:
        return crystal_from_document(doc, str(path)).lattice
    if isinstance(doc, dict) and "vectors" in doc:
        return _vectors(doc["vectors"], f"{path}: vectors")
    if isinstance(doc, dict) and "lattice" in doc:
        return _lattice_from_section(doc["lattice"], doc.get("group"), str(path))
    raise DocumentError(f"{path}: expected \"vectors\" or a \"lattice\" object")


def crystal_to_cif(crystal: Crystal, name: str = "sgdiff") -> str:
    p = params_from_lattice(crystal.lattice)
    lines = [
        f"data_{name}",
        "_symmetry_space_group_name_H-M   'P 1'",
        "_symmetry_Int_Tables_number   1",
        f"_cell_length_a   {p.a!r}",
        f"_cell_length_b   {p.b!r}",
        f"_cell_length_c   {p.c!r}",
        f"_cell_angle_alpha   {p.alpha!r}",
        f"_cell_angle_beta   {p.beta!r}",
        f"_cell_angle_gamma   {p.gamma!r}",
        f"_cell_volume   {crystal.volume!r}",
        "loop_",
        " _symmetry_equiv_pos_as_xyz",
        "  'x, y, z'",
        "loop_",
        " _atom_site_label",
        " _atom_site_type_symbol",
        " _atom_site_fract_x",
        " _atom_site_fract_y",
        " _atom_site_fract_z",
        " _atom_site_occupancy",
    ]
    counters: Dict[str, int] = {}
    for element, (x, y, z) in zip(crystal.species, wrap_frac(crystal.frac_coords)):
        counters[element] = counters.get(element, 0) + 1
        lines.append(f"  {element}{counters[element]}  {element}  {x!r}  {y!r}  {z!r}  1")
    return "\n".join(lines) + "\n"


def write_cif(crystal: Crystal, path: PathLike, name: Optional[str] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(crystal_to_cif(crystal, name or path.stem), encoding="utf-8")
    return path


def write_trajectory(frames: Sequence[Crystal], path: PathLike, steps: Optional[Sequence[int]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "schema": TRAJECTORY_SCHEMA,
        "version": SCHEMA_VERSION,
        "steps": list(steps) if steps is not None else list(range(len(frames))),
        "frames": [crystal_to_document(frame) for frame in frames],
    }
    with path.open("w", encoding="utf-8") as f:
        json.dump(doc, f, indent=4)
        f.write("\n")
    return path
