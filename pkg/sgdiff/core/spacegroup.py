"""
Module: sgdiff.core.spacegroup

Space-group tables and Wyckoff-position algebra.

1) Table loading
   - One UTF-8 text file per space group under `sgdiff/data/spacegroups/`:
     `group <number> <symbol> <family>`, one operation per line as 12 rationals
     (R row-major, then t), then `wyckoff <letter> <multiplicity>` blocks of pairs
     in the same format. `#` starts a comment.
   - Every table is validated on load with exact integer arithmetic (translations in
     24ths): closure, identity, inverses, family, Wyckoff multiplicities and orbit closure.

2) Wyckoff algebra
   - The first pair (R0, t0) of a position defines its basic coordinate: the anchor atom
     sits at w(R0 f' + t0) with f' in the parameter space of R0 (`projector` = pinv(R0)).
   - `orbit_expand`, `project_basic`, `basic_from_position`, `anchor_position`.

3) Whole structures
   - `expand_structure` builds a Crystal from basic sites; `verify_symmetry` checks a
     Crystal against every operation with a Hungarian assignment per operation.
   - `SiteLayout` precomputes the per-atom operators for one (group, letters) assignment.

Exports:
- `WyckoffPosition`, `SpaceGroupEntry`, `SiteLayout`
- `parse_spacegroup_text`, `load_spacegroup_table`, `get_spacegroup`, `available_groups`
- `orbit_expand`, `project_basic`, `basic_from_position`, `anchor_position`
- `verify_symmetry`, `expand_structure`, `relax_to_p1`
"""

import itertools
import logging
import types
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from sgdiff.core.crystal import Crystal, WyckoffAnnotation
from sgdiff.core.lattice import FamilyMask, family_mask, family_of, lattice_from_k
from sgdiff.core.utils import DomainError, SpaceGroupDataError, wrap_frac, wrapped_delta

logger = logging.getLogger(__name__)

DENOMINATOR = 24
_KEY_BASE = 7  # integer matrix entries must lie in [-3, 3]
_SHIFTS = np.array(list(itertools.product(range(-2, 3), repeat=3)), dtype=float)


def _op_keys(rot: np.ndarray, trans24: np.ndarray) -> np.ndarray:
    """Encode integer affine pairs as one int64 each (translations reduced mod 1)."""
    flat = rot.reshape(-1, 9).astype(np.int64) + 3
    key = np.zeros(len(flat), dtype=np.int64)
    for i in range(9):
        key = key * _KEY_BASE + flat[:, i]
    tr = np.mod(trans24.reshape(-1, 3).astype(np.int64), DENOMINATOR)
    for j in range(3):
        key = key * DENOMINATOR + tr[:, j]
    return key


@dataclass(frozen=True, eq=False)
class WyckoffPosition:
    letter: str
    multiplicity: int
    rot_int: np.ndarray = field(repr=False)
    trans24: np.ndarray = field(repr=False)
    rotations: np.ndarray = field(init=False, repr=False)
    translations: np.ndarray = field(init=False, repr=False)
    projector: np.ndarray = field(init=False, repr=False)
    subspace: np.ndarray = field(init=False, repr=False)
    pullbacks: np.ndarray = field(init=False, repr=False)
    free_axes: np.ndarray = field(init=False, repr=False)
    dof: int = field(init=False)

    def __post_init__(self):
        rotations = self.rot_int.astype(float)
        R0 = rotations[0]
        projector = np.linalg.pinv(R0)
        free = np.any(R0 != 0, axis=0)
        subspace = projector @ R0
        if np.allclose(subspace, np.diag(free.astype(float)), atol=1e-12):
            subspace = np.diag(free.astype(float))
        object.__setattr__(self, "rotations", rotations)
        object.__setattr__(self, "translations", self.trans24 / DENOMINATOR)
        object.__setattr__(self, "projector", projector)
        object.__setattr__(self, "subspace", subspace)
        object.__setattr__(self, "pullbacks", np.linalg.pinv(rotations))
        object.__setattr__(self, "free_axes", free)
        object.__setattr__(self, "dof", int(np.linalg.matrix_rank(R0)))

    @property
    def label(self) -> str:
        return f"{self.multiplicity}{self.letter}"

    @property
    def anchor(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.rotations[0], self.translations[0]

    @property
    def metric(self) -> np.ndarray:
        """R0^T R0 on the free axes: inverse covariance (times sigma^2) of projected noise."""
        R_free = self.rotations[0][:, self.free_axes]
        return R_free.T @ R_free


@dataclass(frozen=True, eq=False)
class SpaceGroupEntry:
    number: int
    symbol: str
    family: str
    rot_int: np.ndarray = field(repr=False)
    trans24: np.ndarray = field(repr=False)
    wyckoff_positions: Tuple[WyckoffPosition, ...] = field(repr=False)
    rotations: np.ndarray = field(init=False, repr=False)
    translations: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "rotations", self.rot_int.astype(float))
        object.__setattr__(self, "translations", self.trans24 / DENOMINATOR)

    @property
    def order(self) -> int:
        return len(self.rot_int)

    @property
    def mask(self) -> FamilyMask:
        return family_mask(self.number)

    @property
    def general_position(self) -> WyckoffPosition:
        return max(self.wyckoff_positions, key=lambda w: w.multiplicity)

    def wyckoff(self, letter: str) -> WyckoffPosition:
        for position in self.wyckoff_positions:
            if position.letter == letter:
                return position
        letters = "".join(w.letter for w in self.wyckoff_positions)
        raise DomainError(
            f"space group {self.number} ({self.symbol}) has no Wyckoff position {letter!r}; "
            f"available: {letters}"
        )


def _parse_rational(token: str, where: str, integer: bool = False) -> Fraction:
    try:
        value = Fraction(token)
    except (ValueError, ZeroDivisionError):
        raise SpaceGroupDataError(f"{where}: cannot parse rational {token!r}") from None
    if integer and value.denominator != 1:
        raise SpaceGroupDataError(f"{where}: matrix entry {token!r} must be an integer")
    if DENOMINATOR % value.denominator:
        raise SpaceGroupDataError(f"{where}: denominator of {token!r} does not divide {DENOMINATOR}")
    return value


def _parse_pair(tokens: List[str], where: str) -> Tuple[List[int], List[int]]:
    if len(tokens) != 12:
        raise SpaceGroupDataError(f"{where}: expected 12 rationals, found {len(tokens)}")
    rot = [int(_parse_rational(tok, where, integer=True)) for tok in tokens[:9]]
    if any(abs(v) > 3 for v in rot):
        raise SpaceGroupDataError(f"{where}: matrix entries must lie in [-3, 3]")
    trans = [int(_parse_rational(tok, where) * DENOMINATOR) for tok in tokens[9:]]
    return rot, trans


def parse_spacegroup_text(text: str, source: str = "<string>") -> SpaceGroupEntry:
    """
    Parse one space-group table and validate it.

    Args:
        text (str): File contents.
        source (str): Name used in error messages.

    Raises:
        SpaceGroupDataError: On a parse error (with `source:line`) or a failed validation
            (naming the group).
    """
    header: Optional[Tuple[int, str, str]] = None
    ops: List[Tuple[List[int], List[int]]] = []
    blocks: List[Tuple[str, int, List[Tuple[List[int], List[int]]]]] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        tokens = line.split()
        if tokens[0] == "group":
            if header is not None:
                raise SpaceGroupDataError(f"{where}: duplicate group header")
            if len(tokens) != 4:
                raise SpaceGroupDataError(f"{where}: expected 'group <number> <symbol> <family>'")
            try:
                number = int(tokens[1])
            except ValueError:
                raise SpaceGroupDataError(f"{where}: bad group number {tokens[1]!r}") from None
            header = (number, tokens[2], tokens[3])
        elif header is None:
            raise SpaceGroupDataError(f"{where}: content before the 'group' header")
        elif tokens[0] == "wyckoff":
            if len(tokens) != 3:
                raise SpaceGroupDataError(f"{where}: expected 'wyckoff <letter> <multiplicity>'")
            try:
                multiplicity = int(tokens[2])
            except ValueError:
                raise SpaceGroupDataError(f"{where}: bad multiplicity {tokens[2]!r}") from None
            blocks.append((tokens[1], multiplicity, []))
        elif blocks:
            blocks[-1][2].append(_parse_pair(tokens, where))
        else:
            ops.append(_parse_pair(tokens, where))

    if header is None:
        raise SpaceGroupDataError(f"{source}: missing 'group' header")
    number, symbol, family = header
    if not ops:
        raise SpaceGroupDataError(f"{source}: group {number} lists no operations")

    wyckoff = []
    for letter, multiplicity, pairs in blocks:
        if not pairs:
            raise SpaceGroupDataError(f"{source}: group {number} Wyckoff {letter} lists no pairs")
        wyckoff.append(
            WyckoffPosition(
                letter=letter,
                multiplicity=multiplicity,
                rot_int=np.array([p[0] for p in pairs], dtype=np.int64).reshape(-1, 3, 3),
                trans24=np.mod(np.array([p[1] for p in pairs], dtype=np.int64), DENOMINATOR),
            )
        )
    entry = SpaceGroupEntry(
        number=number,
        symbol=symbol,
        family=family,
        rot_int=np.array([op[0] for op in ops], dtype=np.int64).reshape(-1, 3, 3),
        trans24=np.mod(np.array([op[1] for op in ops], dtype=np.int64), DENOMINATOR),
        wyckoff_positions=tuple(wyckoff),
    )
    validate_entry(entry)
    return entry


def validate_entry(entry: SpaceGroupEntry) -> None:
    """Exact group-theory checks on a parsed table; raises SpaceGroupDataError naming the group."""
    name = f"group {entry.number} ({entry.symbol})"
    try:
        expected_family = family_of(entry.number)
    except DomainError as exc:
        raise SpaceGroupDataError(f"{name}: {exc}") from None
    if entry.family != expected_family:
        raise SpaceGroupDataError(f"{name}: family {entry.family!r}, expected {expected_family!r}")

    rot, tr = entry.rot_int, entry.trans24
    keys = _op_keys(rot, tr)
    if len(np.unique(keys)) != len(keys):
        raise SpaceGroupDataError(f"{name}: duplicate operations")
    identity = _op_keys(np.eye(3, dtype=np.int64)[None], np.zeros((1, 3), dtype=np.int64))
    if not np.isin(identity, keys).all():
        raise SpaceGroupDataError(f"{name}: identity operation missing")

    dets = np.round(np.linalg.det(rot.astype(float))).astype(int)
    if not np.all(np.abs(dets) == 1):
        raise SpaceGroupDataError(f"{name}: operation with |det R| != 1")

    composed_rot = np.einsum("aij,bjk->abik", rot, rot).reshape(-1, 3, 3)
    composed_tr = (np.einsum("aij,bj->abi", rot, tr) + tr[:, None, :]).reshape(-1, 3)
    if not np.isin(_op_keys(composed_rot, composed_tr), keys).all():
        raise SpaceGroupDataError(f"{name}: operations are not closed under composition")

    inv_rot = np.round(np.linalg.inv(rot.astype(float))).astype(np.int64)
    inv_tr = -np.einsum("aij,aj->ai", inv_rot, tr)
    if not np.isin(_op_keys(inv_rot, inv_tr), keys).all():
        raise SpaceGroupDataError(f"{name}: an operation has no inverse in the table")

    letters = [w.letter for w in entry.wyckoff_positions]
    if len(set(letters)) != len(letters):
        raise SpaceGroupDataError(f"{name}: duplicate Wyckoff letters")
    if not entry.wyckoff_positions:
        raise SpaceGroupDataError(f"{name}: no Wyckoff positions")

    for position in entry.wyckoff_positions:
        label = f"{name} Wyckoff {position.label}"
        pair_keys = _op_keys(position.rot_int, position.trans24)
        if len(pair_keys) != position.multiplicity:
            raise SpaceGroupDataError(
                f"{label}: lists {len(pair_keys)} pairs for multiplicity {position.multiplicity}"
            )
        if len(np.unique(pair_keys)) != len(pair_keys):
            raise SpaceGroupDataError(f"{label}: duplicate pairs")
        if entry.order % position.multiplicity:
            raise SpaceGroupDataError(f"{label}: multiplicity does not divide the group order")
        orbit_rot = np.einsum("aij,bjk->abik", rot, position.rot_int).reshape(-1, 3, 3)
        orbit_tr = (np.einsum("aij,bj->abi", rot, position.trans24) + tr[:, None, :]).reshape(-1, 3)
        if not np.isin(_op_keys(orbit_rot, orbit_tr), pair_keys).all():
            raise SpaceGroupDataError(f"{label}: orbit is not closed under the group operations")


def _packaged_tables():
    return resources.files("sgdiff").joinpath("data", "spacegroups")


@lru_cache(maxsize=8)
def _load_table_cached(source: Optional[str]) -> Mapping[int, SpaceGroupEntry]:
    root = _packaged_tables() if source is None else Path(source)
    if root.is_file():
        items = [root]
    else:
        items = sorted((p for p in root.iterdir() if p.name.endswith(".txt")), key=lambda p: p.name)
    table: Dict[int, SpaceGroupEntry] = {}
    for item in items:
        entry = parse_spacegroup_text(item.read_text(encoding="utf-8"), source=str(item))
        if entry.number in table:
            raise SpaceGroupDataError(f"{item}: group {entry.number} defined twice")
        table[entry.number] = entry
    logger.info("Loaded %d space-group tables from %s", len(table), root)
    return types.MappingProxyType(table)


def load_spacegroup_table(source: Optional[Union[str, Path]] = None) -> Mapping[int, SpaceGroupEntry]:
    """
    Load and validate space-group tables.

    Args:
        source (str | Path | None): A table file, a directory of `*.txt` tables, or None for
            the tables shipped with sgdiff.

    Returns:
        Mapping[int, SpaceGroupEntry]: Read-only mapping from group number to entry.
    """
    return _load_table_cached(None if source is None else str(source))


def available_groups() -> Tuple[int, ...]:
    return tuple(sorted(load_spacegroup_table()))


def get_spacegroup(number: Union[int, SpaceGroupEntry]) -> SpaceGroupEntry:
    if isinstance(number, SpaceGroupEntry):
        return number
    table = load_spacegroup_table()
    if number not in table:
        family_of(int(number))
        raise DomainError(
            f"space group {number} is not shipped; available groups: "
            + ", ".join(str(n) for n in sorted(table))
        )
    return table[number]


def project_basic(v, w: WyckoffPosition) -> np.ndarray:
    return w.projector @ np.asarray(v, dtype=float)


def orbit_expand(f_basic, w: WyckoffPosition) -> np.ndarray:
    """Positions w(R_i f' + t_i) of the whole orbit, shape (multiplicity, 3)."""
    f = w.subspace @ np.asarray(f_basic, dtype=float)
    return wrap_frac(np.einsum("nij,j->ni", w.rotations, f) + w.translations)


def anchor_position(f_basic, w: WyckoffPosition) -> np.ndarray:
    R0, t0 = w.anchor
    return wrap_frac(R0 @ (w.subspace @ np.asarray(f_basic, dtype=float)) + t0)


def basic_from_position(position, w: WyckoffPosition, tol: float = 1e-8) -> np.ndarray:
    """
    Basic coordinate f' whose anchor image w(R0 f' + t0) is `position`.

    Raises:
        DomainError: The position is not on the Wyckoff position's anchor subspace.
    """
    p = wrap_frac(position)
    R0, t0 = w.anchor
    targets = p[None, :] - t0[None, :] + _SHIFTS
    candidates = targets @ w.projector.T
    residuals = np.linalg.norm(candidates @ R0.T - targets, axis=1)
    best = int(np.argmin(residuals))
    if residuals[best] > tol:
        raise DomainError(
            f"position {p.tolist()} is not on the anchor subspace of Wyckoff {w.label} "
            f"(residual {residuals[best]:.3g})"
        )
    return wrap_frac(w.subspace @ candidates[best])


def verify_symmetry(crystal: Crystal, entry: Union[int, SpaceGroupEntry], tol: float = 1e-6) -> bool:
    """
    True iff every operation maps the structure onto itself (same species, wrapped
    fractional distance <= tol after an optimal one-to-one assignment).
    """
    entry = get_spacegroup(entry)
    F = crystal.frac_coords
    _, codes = np.unique(np.array(crystal.species), return_inverse=True)
    forbidden = codes[:, None] != codes[None, :]
    for R, t in zip(entry.rotations, entry.translations):
        image = wrap_frac(F @ R.T + t)
        dist = np.linalg.norm(wrapped_delta(image[:, None, :], F[None, :, :]), axis=-1)
        cost = np.where(forbidden, 1e6, dist)
        rows, cols = linear_sum_assignment(cost)
        if cost[rows, cols].max() > tol:
            return False
    return True


def expand_structure(
    basic_species: Sequence[str],
    basic_coords,
    letters: Sequence[str],
    lattice,
    group: Union[int, SpaceGroupEntry],
) -> Crystal:
    """
    Build the full crystal from basic sites.

    Args:
        basic_species (Sequence[str]): Element of each basic site.
        basic_coords: (N', 3) basic coordinates in parameter space.
        letters (Sequence[str]): Wyckoff letter of each basic site.
        lattice: 3x3 lattice matrix or 6-entry k-vector.
        group (int | SpaceGroupEntry): Space group.

    Raises:
        DomainError: Length mismatch, unknown letter, or a basic coordinate off its subspace.
    """
    entry = get_spacegroup(group)
    coords = np.asarray(basic_coords, dtype=float).reshape(-1, 3)
    if not len(basic_species) == len(coords) == len(letters):
        raise DomainError(
            f"{len(basic_species)} species, {len(coords)} basic coordinates and "
            f"{len(letters)} Wyckoff letters"
        )
    lattice = np.asarray(lattice, dtype=float)
    if lattice.shape == (6,):
        lattice = lattice_from_k(lattice)

    species: List[str] = []
    positions: List[np.ndarray] = []
    site_index: List[int] = []
    cleaned = np.zeros_like(coords)
    for i, (element, f, letter) in enumerate(zip(basic_species, coords, letters)):
        w = entry.wyckoff(letter)
        projected = w.subspace @ f
        offset = np.linalg.norm(wrapped_delta(projected, f))
        if offset > 1e-8:
            raise DomainError(
                f"basic coordinate {f.tolist()} of site {i} is off the subspace of "
                f"Wyckoff {w.label} by {offset:.3g}"
            )
        cleaned[i] = wrap_frac(projected)
        orbit = orbit_expand(cleaned[i], w)
        positions.append(orbit)
        species.extend([element] * len(orbit))
        site_index.extend([i] * len(orbit))

    annotation = WyckoffAnnotation(
        group=entry.number,
        letters=tuple(letters),
        basic_species=tuple(basic_species),
        basic_coords=cleaned,
        site_index=np.array(site_index, dtype=int),
    )
    return Crystal(tuple(species), np.concatenate(positions), lattice, annotation)


def relax_to_p1(crystal: Crystal) -> Crystal:
    """Re-annotate a crystal in group 1: every atom becomes its own general-position site."""
    n = crystal.num_atoms
    annotation = WyckoffAnnotation(
        group=1,
        letters=("a",) * n,
        basic_species=crystal.species,
        basic_coords=crystal.frac_coords.copy(),
        site_index=np.arange(n),
    )
    return Crystal(crystal.species, crystal.frac_coords, crystal.lattice, annotation)


@dataclass(frozen=True, eq=False)
class SiteLayout:
    """
    Per-atom operators of one (group, Wyckoff letters) assignment.

    Atoms are ordered site by site, each orbit in table order, which is also the order
    `expand_structure` produces.
    """

    group: SpaceGroupEntry
    letters: Tuple[str, ...]
    positions: Tuple[WyckoffPosition, ...] = field(init=False, repr=False)
    site_index: np.ndarray = field(init=False, repr=False)
    rotations: np.ndarray = field(init=False, repr=False)
    translations: np.ndarray = field(init=False, repr=False)
    pullbacks: np.ndarray = field(init=False, repr=False)
    subspaces: np.ndarray = field(init=False, repr=False)
    projectors: np.ndarray = field(init=False, repr=False)
    anchors: np.ndarray = field(init=False, repr=False)
    multiplicities: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.letters:
            raise DomainError("a Wyckoff assignment needs at least one site")
        object.__setattr__(self, "letters", tuple(self.letters))
        positions = tuple(self.group.wyckoff(letter) for letter in self.letters)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(
            self,
            "site_index",
            np.concatenate([np.full(w.multiplicity, i) for i, w in enumerate(positions)]),
        )
        object.__setattr__(self, "rotations", np.concatenate([w.rotations for w in positions]))
        object.__setattr__(self, "translations", np.concatenate([w.translations for w in positions]))
        object.__setattr__(self, "pullbacks", np.concatenate([w.pullbacks for w in positions]))
        object.__setattr__(self, "subspaces", np.stack([w.subspace for w in positions]))
        object.__setattr__(self, "projectors", np.stack([w.projector for w in positions]))
        object.__setattr__(self, "anchors", np.stack([w.rotations[0] for w in positions]))
        object.__setattr__(self, "multiplicities", np.array([w.multiplicity for w in positions]))

    @classmethod
    def from_letters(cls, group: Union[int, SpaceGroupEntry], letters: Iterable[str]) -> "SiteLayout":
        return cls(get_spacegroup(group), tuple(letters))

    @classmethod
    def from_crystal(cls, crystal: Crystal) -> "SiteLayout":
        if crystal.annotation is None:
            raise DomainError("crystal has no space-group/Wyckoff annotation")
        return cls.from_letters(crystal.annotation.group, crystal.annotation.letters)

    @property
    def mask(self) -> FamilyMask:
        return self.group.mask

    @property
    def n_sites(self) -> int:
        return len(self.letters)

    @property
    def n_atoms(self) -> int:
        return len(self.site_index)

    def expand(self, basic_coords: np.ndarray) -> np.ndarray:
        """(N', 3) basic coordinates -> (N, 3) wrapped atom positions."""
        f = np.einsum("sij,sj->si", self.subspaces, basic_coords)[self.site_index]
        return wrap_frac(np.einsum("nij,nj->ni", self.rotations, f) + self.translations)

    def project(self, basic_coords: np.ndarray) -> np.ndarray:
        return wrap_frac(np.einsum("sij,sj->si", self.subspaces, basic_coords))

    def site_mean(self, values: np.ndarray) -> np.ndarray:
        """Average per-atom rows over each Wyckoff orbit: (N, ...) -> (N', ...)."""
        values = np.asarray(values, dtype=float)
        sums = np.zeros((self.n_sites,) + values.shape[1:])
        np.add.at(sums, self.site_index, values)
        return sums / self.multiplicities.reshape((-1,) + (1,) * (values.ndim - 1))
