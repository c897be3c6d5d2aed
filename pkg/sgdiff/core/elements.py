"""
Module: sgdiff.core.elements

Element data and the atom-type vocabulary.

1) Element table
   - Loaded from `sgdiff/data/elements.tsv` (header `# elements v1`): symbol, atomic
     number, period, group, Pauling electronegativity, covalent radius, standard weight.
   - Missing electronegativities are imputed with the column mean before z-scoring.

2) Descriptors
   - `element_descriptors(symbols)` returns z-scored (atomic number, period, group,
     electronegativity, covalent radius) rows used by template ranking and substitution.

3) Type vocabulary
   - `TypeVocabulary` maps element symbols to one-hot columns and decodes by argmax.

Exports:
- `ElementData`, `load_element_table`, `get_element`, `atomic_mass`, `element_descriptors`
- `TypeVocabulary`
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from sgdiff.core.utils import DocumentError, DomainError

logger = logging.getLogger(__name__)

TABLE_VERSION = "# elements v1"
DESCRIPTOR_FIELDS = ("z", "period", "group", "electronegativity", "covalent_radius")


@dataclass(frozen=True)
class ElementData:
    symbol: str
    z: int
    period: int
    group: int
    electronegativity: Optional[float]
    covalent_radius: float
    mass: float


def _parse_table(text: str, source: str) -> Mapping[str, ElementData]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != TABLE_VERSION:
        raise DocumentError(f"{source}:1: expected header {TABLE_VERSION!r}")
    table = {}
    header_seen = False
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip() or raw.startswith("#"):
            continue
        fields = raw.rstrip("\n").split("\t")
        if not header_seen:
            header_seen = True
            if fields[0] == "symbol":
                continue
        if len(fields) != 7:
            raise DocumentError(f"{source}:{lineno}: expected 7 tab-separated fields, found {len(fields)}")
        try:
            element = ElementData(
                symbol=fields[0],
                z=int(fields[1]),
                period=int(fields[2]),
                group=int(fields[3]),
                electronegativity=float(fields[4]) if fields[4] else None,
                covalent_radius=float(fields[5]),
                mass=float(fields[6]),
            )
        except ValueError as exc:
            raise DocumentError(f"{source}:{lineno}: {exc}") from None
        table[element.symbol] = element
    return table


@lru_cache(maxsize=4)
def _load_cached(source: Optional[str]) -> Mapping[str, ElementData]:
    if source is None:
        path = resources.files("sgdiff").joinpath("data", "elements.tsv")
    else:
        path = Path(source)
    table = _parse_table(path.read_text(encoding="utf-8"), str(path))
    logger.debug("Loaded %d elements from %s", len(table), path)
    return table


def load_element_table(source: Optional[Union[str, Path]] = None) -> Mapping[str, ElementData]:
    return dict(_load_cached(None if source is None else str(source)))


def get_element(symbol: str) -> ElementData:
    table = _load_cached(None)
    if symbol not in table:
        raise DomainError(f"unknown element symbol {symbol!r}")
    return table[symbol]


def atomic_mass(symbol: str) -> float:
    return get_element(symbol).mass


@lru_cache(maxsize=1)
def _descriptor_table() -> Tuple[Tuple[str, ...], np.ndarray]:
    table = _load_cached(None)
    symbols = tuple(table)
    raw = np.array(
        [
            [
                np.nan if getattr(table[s], name) is None else float(getattr(table[s], name))
                for name in DESCRIPTOR_FIELDS
            ]
            for s in symbols
        ]
    )
    column_mean = np.nanmean(raw, axis=0)
    raw = np.where(np.isnan(raw), column_mean, raw)
    scaled = (raw - raw.mean(axis=0)) / raw.std(axis=0)
    scaled.setflags(write=False)
    return symbols, scaled


def element_descriptors(symbols: Iterable[str]) -> np.ndarray:
    """Z-scored descriptor rows, shape (len(symbols), 5)."""
    names, scaled = _descriptor_table()
    index = {s: i for i, s in enumerate(names)}
    rows = []
    for symbol in symbols:
        if symbol not in index:
            raise DomainError(f"unknown element symbol {symbol!r}")
        rows.append(scaled[index[symbol]])
    return np.array(rows).reshape(-1, len(DESCRIPTOR_FIELDS))


@dataclass(frozen=True)
class TypeVocabulary:
    """Ordered element classes; column i of a type matrix is `symbols[i]`."""

    symbols: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "symbols", tuple(self.symbols))
        if not self.symbols:
            raise DomainError("type vocabulary is empty")
        if len(set(self.symbols)) != len(self.symbols):
            raise DomainError("type vocabulary has duplicate symbols")
        for symbol in self.symbols:
            get_element(symbol)

    @classmethod
    def from_species(cls, species: Iterable[str]) -> "TypeVocabulary":
        unique = set(species)
        return cls(tuple(sorted(unique, key=lambda s: get_element(s).z)))

    @classmethod
    def from_crystals(cls, crystals) -> "TypeVocabulary":
        return cls.from_species(s for c in crystals for s in c.species)

    @property
    def size(self) -> int:
        return len(self.symbols)

    def index(self, symbol: str) -> int:
        try:
            return self.symbols.index(symbol)
        except ValueError:
            raise DomainError(f"element {symbol!r} is not in the type vocabulary {list(self.symbols)}") from None

    def one_hot(self, species: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(species), self.size))
        for row, symbol in enumerate(species):
            out[row, self.index(symbol)] = 1.0
        return out

    def decode(self, types: np.ndarray) -> Tuple[str, ...]:
        types = np.asarray(types, dtype=float).reshape(-1, self.size)
        return tuple(self.symbols[i] for i in np.argmax(types, axis=1))
