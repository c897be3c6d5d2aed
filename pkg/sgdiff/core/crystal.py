"""
Module: sgdiff.core.crystal

Immutable crystal value types shared by the diffusion, evaluation, template and
document layers.

1) `Crystal`
   - Element symbols (one per atom), fractional coordinates wrapped to [0, 1) as an
     (N, 3) array, lattice matrix in column convention, optional Wyckoff annotation.

2) `WyckoffAnnotation`
   - Space group number, Wyckoff letter and element per basic site, basic coordinates
     F' (N', 3) in each position's parameter space, and the basic site of every atom.

Exports:
- `Crystal`
- `WyckoffAnnotation`
"""

from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from sgdiff.core.lattice import encode_lattice, lattice_from_k
from sgdiff.core.utils import DomainError, wrap_frac


@dataclass(frozen=True, eq=False)
class WyckoffAnnotation:
    group: int
    letters: Tuple[str, ...]
    basic_species: Tuple[str, ...]
    basic_coords: np.ndarray
    site_index: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "letters", tuple(self.letters))
        object.__setattr__(self, "basic_species", tuple(self.basic_species))
        coords = np.asarray(self.basic_coords, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "basic_coords", coords)
        object.__setattr__(self, "site_index", np.asarray(self.site_index, dtype=int))
        if not len(self.letters) == len(self.basic_species) == len(coords):
            raise DomainError(
                f"annotation has {len(self.letters)} letters, {len(self.basic_species)} species "
                f"and {len(coords)} basic coordinates"
            )

    @property
    def n_sites(self) -> int:
        return len(self.letters)


@dataclass(frozen=True, eq=False)
class Crystal:
    species: Tuple[str, ...]
    frac_coords: np.ndarray
    lattice: np.ndarray
    annotation: Optional[WyckoffAnnotation] = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "species", tuple(self.species))
        coords = np.asarray(self.frac_coords, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise DomainError(f"fractional coordinates must have shape (N, 3), got {coords.shape}")
        if len(coords) != len(self.species):
            raise DomainError(f"{len(self.species)} species for {len(coords)} coordinates")
        if len(coords) == 0:
            raise DomainError("a crystal needs at least one atom")
        object.__setattr__(self, "frac_coords", wrap_frac(coords))
        lattice = np.asarray(self.lattice, dtype=float)
        if lattice.shape != (3, 3):
            raise DomainError(f"lattice must be 3x3, got shape {lattice.shape}")
        if np.linalg.det(lattice) <= 0:
            raise DomainError("lattice matrix must have a positive determinant")
        object.__setattr__(self, "lattice", lattice)
        if self.annotation is not None and len(self.annotation.site_index) != len(coords):
            raise DomainError("annotation site index does not cover every atom")

    @classmethod
    def from_k(cls, species: Sequence[str], frac_coords, k, annotation=None) -> "Crystal":
        return cls(tuple(species), frac_coords, lattice_from_k(k), annotation)

    @property
    def num_atoms(self) -> int:
        return len(self.species)

    @property
    def volume(self) -> float:
        return float(np.linalg.det(self.lattice))

    @property
    def cart_coords(self) -> np.ndarray:
        return self.frac_coords @ self.lattice.T

    @property
    def k(self) -> np.ndarray:
        return encode_lattice(self.lattice)

    @property
    def group(self) -> Optional[int]:
        return None if self.annotation is None else self.annotation.group

    def composition(self) -> Dict[str, int]:
        return dict(Counter(self.species))

    def with_lattice(self, lattice) -> "Crystal":
        return replace(self, lattice=np.asarray(lattice, dtype=float))

    def without_annotation(self) -> "Crystal":
        return replace(self, annotation=None)

    def reordered(self, order: Sequence[int]) -> "Crystal":
        """Same crystal with atoms permuted; the annotation's site index follows the atoms."""
        order = np.asarray(order, dtype=int)
        annotation = self.annotation
        if annotation is not None:
            annotation = replace(annotation, site_index=annotation.site_index[order])
        return Crystal(
            tuple(self.species[i] for i in order),
            self.frac_coords[order],
            self.lattice,
            annotation,
        )
