"""
Module: sgdiff.core.templates

Template-based crystal structure prediction: find a known structure with the same
composition ratio, swap its elements for the query's, then refine it with the diffusion
sampler under the template's space group and Wyckoff assignment.

1) Index
   - `TemplateIndex` holds named, annotated, symmetry-verified crystals with their ratio
     signatures (sorted reduced integer counts, e.g. SrTiO3 -> (1, 1, 3)).

2) Retrieval
   - Candidates share the query's ratio signature. Elements are compared within classes of
     equal reduced count; the distance D is the optimal-assignment sum of L2 distances
     between z-scored element descriptors, and similarity is 1 / (1 + D).
   - Ranked by descending similarity, ties kept in index order.

3) Substitution and prediction
   - `substitute` applies the optimal element assignment to the template's basic sites and
     re-expands, so group, letters and multiplicities are unchanged.
   - `predict_structure` = retrieve -> substitute -> refine.

Exports:
- `TemplateEntry`, `TemplateIndex`, `Candidate`, `Prediction`
- `parse_formula`, `ratio_signature`, `retrieve`, `substitute`, `predict_structure`
"""

import logging
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from functools import reduce
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from sgdiff.core.crystal import Crystal
from sgdiff.core.documents import read_dataset
from sgdiff.core.elements import element_descriptors, get_element
from sgdiff.core.spacegroup import expand_structure, verify_symmetry
from sgdiff.core.utils import DomainError

logger = logging.getLogger(__name__)

Composition = Mapping[str, int]
RefineFn = Callable[[Crystal], Crystal]

_FORMULA_TOKEN = re.compile(r"([A-Z][a-z]?)(\d*)")


def parse_formula(formula: str) -> Dict[str, int]:
    """'SrTiO3' -> {'Sr': 1, 'Ti': 1, 'O': 3}. No brackets or hydrates."""
    text = formula.replace(" ", "")
    if not text or "".join(m.group(0) for m in _FORMULA_TOKEN.finditer(text)) != text:
        raise DomainError(f"cannot parse formula {formula!r}")
    counts: Counter = Counter()
    for symbol, digits in _FORMULA_TOKEN.findall(text):
        get_element(symbol)
        counts[symbol] += int(digits) if digits else 1
    if any(v <= 0 for v in counts.values()):
        raise DomainError(f"formula {formula!r} has a zero count")
    return dict(counts)


def _reduced(composition: Composition) -> Dict[str, int]:
    if not composition or any(int(n) <= 0 for n in composition.values()):
        raise DomainError(f"composition needs positive counts, got {dict(composition)}")
    divisor = reduce(math.gcd, (int(n) for n in composition.values()))
    return {element: int(n) // divisor for element, n in composition.items()}


def ratio_signature(composition: Composition) -> Tuple[int, ...]:
    return tuple(sorted(_reduced(composition).values()))


@dataclass(frozen=True, eq=False)
class TemplateEntry:
    name: str
    signature: Tuple[int, ...]
    crystal: Crystal


class TemplateIndex:
    """Immutable list of annotated, symmetry-verified templates."""

    def __init__(self, entries: Iterable[TemplateEntry]):
        self._entries: Tuple[TemplateEntry, ...] = tuple(entries)

    @classmethod
    def from_crystals(cls, named: Iterable[Tuple[str, Crystal]]) -> "TemplateIndex":
        entries = []
        for name, crystal in named:
            if crystal.annotation is None:
                logger.warning("Skipping template %s: no space-group/Wyckoff annotation", name)
                continue
            if not verify_symmetry(crystal, crystal.annotation.group):
                raise DomainError(f"template {name} is not symmetric under group {crystal.annotation.group}")
            entries.append(TemplateEntry(name, ratio_signature(crystal.composition()), crystal))
        logger.info("Template index holds %d entries", len(entries))
        return cls(entries)

    @classmethod
    def from_directory(cls, path: Union[str, Path]) -> "TemplateIndex":
        return cls.from_crystals(read_dataset(path))

    @property
    def entries(self) -> Tuple[TemplateEntry, ...]:
        return self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> List[str]:
        return [entry.name for entry in self._entries]


@dataclass(frozen=True)
class Candidate:
    entry: TemplateEntry
    similarity: float
    mapping: Dict[str, str]  # template element -> query element


def _ratio_classes(composition: Composition) -> Dict[int, List[str]]:
    classes: Dict[int, List[str]] = defaultdict(list)
    for element, n in sorted(_reduced(composition).items()):
        classes[n].append(element)
    return classes


def _assignment(query: Composition, template: Composition) -> Tuple[float, Dict[str, str]]:
    """Minimum total descriptor distance and the template -> query element map."""
    query_classes, template_classes = _ratio_classes(query), _ratio_classes(template)
    total = 0.0
    mapping: Dict[str, str] = {}
    for count, query_elements in query_classes.items():
        template_elements = template_classes[count]
        q = element_descriptors(query_elements)
        p = element_descriptors(template_elements)
        cost = np.linalg.norm(p[:, None, :] - q[None, :, :], axis=-1)
        rows, cols = linear_sum_assignment(cost)
        total += float(cost[rows, cols].sum())
        mapping.update({template_elements[r]: query_elements[c] for r, c in zip(rows, cols)})
    return total, mapping


def retrieve(composition: Composition, index: TemplateIndex, exclude: Sequence[str] = ()) -> List[Candidate]:
    """
    Templates sharing the query's ratio signature, most similar first.

    Args:
        composition (Mapping[str, int]): Query element counts (any multiple of the formula).
        index (TemplateIndex): Nonempty template set.
        exclude (Sequence[str]): Entry names to leave out.

    Returns:
        List[Candidate]: Empty when no template shares the ratio signature.
    """
    if not len(index):
        raise DomainError("template index is empty")
    signature = ratio_signature(composition)
    candidates = []
    for entry in index.entries:
        if entry.signature != signature or entry.name in exclude:
            continue
        distance, mapping = _assignment(composition, entry.crystal.composition())
        candidates.append(Candidate(entry, 1.0 / (1.0 + distance), mapping))
    candidates.sort(key=lambda c: -c.similarity)
    logger.debug("Retrieved %d candidates for signature %s", len(candidates), signature)
    return candidates


def substitute(composition: Composition, template: Crystal) -> Crystal:
    """Swap the template's elements for the query's by optimal descriptor assignment."""
    if template.annotation is None:
        raise DomainError("substitution needs an annotated template")
    if ratio_signature(composition) != ratio_signature(template.composition()):
        raise DomainError(
            f"composition {dict(composition)} does not share the ratio signature of the template "
            f"{template.composition()}"
        )
    _, mapping = _assignment(composition, template.composition())
    annotation = template.annotation
    return expand_structure(
        [mapping[element] for element in annotation.basic_species],
        annotation.basic_coords,
        annotation.letters,
        template.lattice,
        annotation.group,
    )


@dataclass(frozen=True)
class Prediction:
    crystal: Crystal
    template: str
    similarity: float


def predict_structure(
    composition: Composition,
    index: TemplateIndex,
    refine_fn: RefineFn,
    exclude: Sequence[str] = (),
) -> Optional[Prediction]:
    """Best template, substituted and refined; None when no template shares the ratio."""
    candidates = retrieve(composition, index, exclude)
    if not candidates:
        logger.warning("No template with ratio signature %s", ratio_signature(composition))
        return None
    best = candidates[0]
    crystal = refine_fn(substitute(composition, best.entry.crystal))
    return Prediction(crystal, best.entry.name, best.similarity)
