"""
Module: sgdiff.core.evaluation

Structure matching, match-rate reporting, structural validity and property statistics.

1) Matcher (`match_structures`)
   - Both cells are rescaled to a common volume, then every basis of the first lattice
     whose lengths/angles fall within ltol/angle_tol of the second lattice is tried.
   - For each basis, sites are compared on the average lattice: translations are seeded by
     pairing one atom of the rarest species, sites are assigned by the Hungarian method on
     squared periodic Cartesian distance, and the mean displacement is removed.
   - Distances are normalized by (V/N)^(1/3); matched iff the largest is <= stol. The
     comparison runs in both directions and keeps the best, so it is symmetric.
   - Only right-handed bases are tried, so a chiral structure does not match its mirror
     image.
   - No Niggli/primitive reduction and no supercells: cells must have equal atom counts.

2) Reports
   - `match_rate`, `mean_rmsd`, `MatchRecord`, `write_report`, `summarize_matches`.

3) Validity and statistics
   - `structural_validity`: minimum periodic distance over the 27 neighbouring cells > 0.5 A.
   - `property_stats`: Wasserstein-1 distances of densities and element counts.

Exports:
- `MatchSettings`, `MatchReport`, `match_structures`, `match_rate`, `mean_rmsd`
- `MatchRecord`, `write_report`, `summarize_matches`
- `minimum_distance`, `structural_validity`, `density`, `element_count`, `property_stats`
"""

import itertools
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import wasserstein_distance

from sgdiff.core.crystal import Crystal
from sgdiff.core.elements import atomic_mass
from sgdiff.core.lattice import LatticeParams, lattice_from_params, params_from_lattice
from sgdiff.core.utils import DomainError, wrap_frac, wrapped_delta

logger = logging.getLogger(__name__)

AMU_PER_A3_TO_G_PER_CM3 = 1.66053906660
VALIDITY_THRESHOLD = 0.5
_IMAGES = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=float)


@dataclass(frozen=True)
class MatchSettings:
    stol: float = 0.5
    ltol: float = 0.3
    angle_tol: float = 10.0

    def __post_init__(self):
        for name in ("stol", "ltol", "angle_tol"):
            if getattr(self, name) <= 0:
                raise DomainError(f"match tolerance {name} must be positive, got {getattr(self, name)}")


@dataclass(frozen=True)
class MatchReport:
    matched: bool
    rmsd: Optional[float] = None


def _angles(B: np.ndarray) -> np.ndarray:
    """(..., 3, 3) column bases -> (..., 3) angles alpha, beta, gamma in degrees."""
    lengths = np.linalg.norm(B, axis=-2)
    out = []
    for j, k in ((1, 2), (0, 2), (0, 1)):
        cos = np.sum(B[..., :, j] * B[..., :, k], axis=-1) / (lengths[..., j] * lengths[..., k])
        out.append(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
    return np.stack(out, axis=-1)


def _candidate_bases(L1: np.ndarray, L2: np.ndarray, settings: MatchSettings) -> np.ndarray:
    """Bases of the lattice L1 (columns) shaped like L2 within ltol/angle_tol; shape (M, 3, 3)."""
    target_lengths = np.linalg.norm(L2, axis=0)
    target_angles = _angles(L2)
    radius = (1.0 + settings.ltol) * target_lengths.max()
    reach = np.ceil(radius * np.linalg.norm(np.linalg.inv(L1), axis=1)).astype(int)
    grid = np.array(
        list(itertools.product(*(range(-r, r + 1) for r in reach))), dtype=float
    )
    vectors = grid @ L1.T
    lengths = np.linalg.norm(vectors, axis=1)

    per_axis = []
    for length in target_lengths:
        keep = (lengths > (1.0 - settings.ltol) * length) & (lengths < (1.0 + settings.ltol) * length)
        if not keep.any():
            return np.zeros((0, 3, 3))
        per_axis.append(vectors[keep])

    a, b, c = per_axis
    bases = np.stack(
        [
            np.broadcast_to(a[:, None, None, :], (len(a), len(b), len(c), 3)),
            np.broadcast_to(b[None, :, None, :], (len(a), len(b), len(c), 3)),
            np.broadcast_to(c[None, None, :, :], (len(a), len(b), len(c), 3)),
        ],
        axis=-1,
    ).reshape(-1, 3, 3)
    volume = abs(np.linalg.det(L1))
    # right-handed only, like every Crystal lattice; a mirror image is not a match
    dets = np.linalg.det(bases)
    bases = bases[(dets > 0.999 * volume) & (dets < 1.001 * volume)]
    if len(bases) == 0:
        return bases
    ok = np.all(np.abs(_angles(bases) - target_angles) < settings.angle_tol, axis=1)
    return bases[ok]


def _average_lattice(B: np.ndarray, L2: np.ndarray) -> np.ndarray:
    p1, p2 = params_from_lattice(B), params_from_lattice(L2)
    mean = (np.array(p1.as_tuple()) + np.array(p2.as_tuple())) / 2.0
    return lattice_from_params(LatticeParams(*mean))


def _site_distances(
    f1: np.ndarray, f2: np.ndarray, lattice: np.ndarray, forbidden: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Shortest periodic Cartesian vectors from every f2 site to every f1 site: (N2, N1, 3)."""
    delta = wrapped_delta(f1[None, :, :], f2[:, None, :])
    cart = (delta[:, :, None, :] + _IMAGES) @ lattice.T
    sq = np.sum(cart**2, axis=-1)
    best = np.argmin(sq, axis=-1)
    vecs = np.take_along_axis(cart, best[..., None, None], axis=2)[:, :, 0, :]
    d2 = np.take_along_axis(sq, best[..., None], axis=2)[..., 0]
    return vecs, np.where(forbidden, 1e12, d2)


def _match_one_way(s1: Crystal, s2: Crystal, settings: MatchSettings) -> Optional[float]:
    """Best normalized RMS over candidate bases and translations, or None when nothing matches."""
    ratio = (s2.volume / s1.volume) ** (1.0 / 6.0)
    L1, L2 = s1.lattice * ratio, s2.lattice / ratio
    species1, species2 = np.array(s1.species), np.array(s2.species)
    forbidden = species2[:, None] != species1[None, :]

    counts = Counter(s2.species)
    rarest = min(counts, key=lambda s: (counts[s], s))
    pivot = int(np.flatnonzero(species2 == rarest)[0])
    partners = np.flatnonzero(species1 == rarest)
    f2 = s2.frac_coords
    cart1 = s1.frac_coords @ L1.T

    best: Optional[float] = None
    bases = _candidate_bases(L1, L2, settings)
    for B in bases:
        f1 = wrap_frac(cart1 @ np.linalg.inv(B).T)
        lattice = _average_lattice(B, L2)
        norm_length = (abs(np.linalg.det(lattice)) / len(f1)) ** (1.0 / 3.0)
        for i in partners:
            shift = f2[pivot] - f1[i]
            vecs, d2 = _site_distances(wrap_frac(f1 + shift), f2, lattice, forbidden)
            rows, cols = linear_sum_assignment(d2)
            if d2[rows, cols].max() >= 1e12:
                continue
            short = vecs[rows, cols]
            short = short - short.mean(axis=0)
            dist = np.linalg.norm(short, axis=1) / norm_length
            if dist.max() > settings.stol:
                continue
            rms = float(np.sqrt(np.mean(dist**2)))
            if best is None or rms < best:
                best = rms
    logger.debug("Tried %d candidate bases, best rms %s", len(bases), best)
    return best


def match_structures(pred: Crystal, ref: Crystal, settings: MatchSettings = MatchSettings()) -> MatchReport:
    """
    Compare two crystals up to periodic translation, rigid rotation and atom order.

    Args:
        pred (Crystal): Generated structure.
        ref (Crystal): Reference structure.
        settings (MatchSettings): stol, ltol and angle_tol.

    Returns:
        MatchReport: `rmsd` is the normalized RMS displacement when matched, else None.
    """
    if Counter(pred.species) != Counter(ref.species):
        return MatchReport(False, None)
    results = [r for r in (_match_one_way(pred, ref, settings), _match_one_way(ref, pred, settings)) if r is not None]
    if not results:
        return MatchReport(False, None)
    return MatchReport(True, min(results))


def match_rate(reports: Sequence[MatchReport]) -> float:
    if not reports:
        raise DomainError("match rate of an empty set")
    return sum(r.matched for r in reports) / len(reports)


def mean_rmsd(reports: Sequence[MatchReport]) -> Optional[float]:
    """Mean RMSD over matched pairs only; None when nothing matched."""
    if not reports:
        raise DomainError("mean RMSD of an empty set")
    values = [r.rmsd for r in reports if r.matched]
    return float(np.mean(values)) if values else None


@dataclass(frozen=True)
class MatchRecord:
    name: str
    report: MatchReport


def write_report(rows: Sequence[MatchRecord], path: Union[str, Path]) -> Path:
    """Tab-separated table `name matched rmsd`, one row per pair."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["name\tmatched\trmsd"]
    for row in rows:
        rmsd = "" if row.report.rmsd is None else repr(row.report.rmsd)
        lines.append(f"{row.name}\t{int(row.report.matched)}\t{rmsd}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def summarize_matches(rows: Sequence[MatchRecord]) -> str:
    reports = [row.report for row in rows]
    rmsd = mean_rmsd(reports)
    return "\n".join(
        [
            f"pairs: {len(reports)}",
            f"matched: {sum(r.matched for r in reports)}",
            f"match rate: {match_rate(reports):.4f}",
            f"mean rmsd: {'n/a' if rmsd is None else f'{rmsd:.6f}'}",
        ]
    )


def minimum_distance(crystal: Crystal) -> float:
    """Smallest Cartesian distance between any two atoms or an atom and its own images."""
    F = crystal.frac_coords
    delta = wrapped_delta(F[None, :, :], F[:, None, :])
    cart = (delta[:, :, None, :] + _IMAGES) @ crystal.lattice.T
    dist = np.linalg.norm(cart, axis=-1)
    n = len(F)
    self_origin = np.zeros(dist.shape, dtype=bool)
    origin = int(np.flatnonzero(np.all(_IMAGES == 0, axis=1))[0])
    self_origin[np.arange(n), np.arange(n), origin] = True
    return float(np.min(np.where(self_origin, np.inf, dist)))


def structural_validity(crystal: Crystal, threshold: float = VALIDITY_THRESHOLD) -> bool:
    return minimum_distance(crystal) > threshold


def density(crystal: Crystal) -> float:
    """Mass density in g/cm^3."""
    mass = sum(atomic_mass(s) for s in crystal.species)
    return mass * AMU_PER_A3_TO_G_PER_CM3 / crystal.volume


def element_count(crystal: Crystal) -> int:
    return len(set(crystal.species))


def property_stats(generated: Iterable[Crystal], reference: Iterable[Crystal]) -> Tuple[float, float]:
    """(W1 of densities, W1 of element counts) between two nonempty sets."""
    generated, reference = list(generated), list(reference)
    if not generated or not reference:
        raise DomainError("property statistics need two nonempty sets")
    d_rho = wasserstein_distance([density(c) for c in generated], [density(c) for c in reference])
    d_elem = wasserstein_distance([element_count(c) for c in generated], [element_count(c) for c in reference])
    return float(d_rho), float(d_elem)


def validity_fraction(crystals: Sequence[Crystal]) -> float:
    if not crystals:
        raise DomainError("validity of an empty set")
    return sum(structural_validity(c) for c in crystals) / len(crystals)
