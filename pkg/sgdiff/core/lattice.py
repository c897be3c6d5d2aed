"""
Module: sgdiff.core.lattice

Invertible lattice algebra used by every other sgdiff module:

1) Polar decomposition L = Q exp(S)
   - J = L^T L = U diag(w) U^T, S = 1/2 U log(w) U^T, Q = L exp(S)^-1.
   - Eigenvalues are ordered descending and eigenvector signs fixed, so repeated
     runs give bit-identical S.

2) k-vectors
   - S is expanded in six mutually orthogonal symmetric bases B1..B6
     (squared Frobenius norms 2, 2, 2, 2, 6, 3); k_i = <S, B_i> / <B_i, B_i>.
   - `lattice_from_k` returns exp(S) itself, i.e. the Q = I gauge.

3) Crystal families
   - `family_mask(group_number)` gives which k dimensions are free per family and
     the fixed values of the others (hexagonal pins k1 = -log(3)/4).
   - `lattice_params_check` verifies the family's length/angle shape.

Lattice matrices use the column convention: `L[:, i]` is the i-th lattice vector,
so a rigid rotation acts as `O @ L`.

Exports:
- `polar_decompose`, `symmetric_log`, `k_from_symmetric`, `symmetric_from_k`
- `encode_lattice`, `lattice_from_k`
- `LatticeParams`, `params_from_lattice`, `lattice_from_params`, `lattice_params_check`
- `FamilyMask`, `family_of`, `family_mask`, `project_k`, `compatible_families`
"""

import logging
from dataclasses import dataclass
from typing import List, Tuple, TypeAlias

import numpy as np

from sgdiff.core.utils import DomainError

logger = logging.getLogger(__name__)

LatticeMatrix: TypeAlias = np.ndarray
KVector: TypeAlias = np.ndarray

BASES = np.array(
    [
        [[0, 1, 0], [1, 0, 0], [0, 0, 0]],
        [[0, 0, 1], [0, 0, 0], [1, 0, 0]],
        [[0, 0, 0], [0, 0, 1], [0, 1, 0]],
        [[1, 0, 0], [0, -1, 0], [0, 0, 0]],
        [[1, 0, 0], [0, 1, 0], [0, 0, -2]],
        [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
    ],
    dtype=float,
)
BASIS_NORMS = np.einsum("kij,kij->k", BASES, BASES)

FAMILIES = ("triclinic", "monoclinic", "orthorhombic", "tetragonal", "hexagonal", "cubic")
HEXAGONAL_K1 = -np.log(3.0) / 4.0

# (last group number, free flags) per family, in ascending order
_FAMILY_TABLE = (
    (2, "triclinic", (1, 1, 1, 1, 1, 1)),
    (15, "monoclinic", (0, 1, 0, 1, 1, 1)),
    (74, "orthorhombic", (0, 0, 0, 1, 1, 1)),
    (142, "tetragonal", (0, 0, 0, 0, 1, 1)),
    (194, "hexagonal", (1, 0, 0, 0, 1, 1)),
    (230, "cubic", (0, 0, 0, 0, 0, 1)),
)


@dataclass(frozen=True)
class FamilyMask:
    family: str
    free: Tuple[bool, ...]
    fixed: Tuple[float, ...]

    @property
    def m(self) -> np.ndarray:
        """Free flags as a float 0/1 vector."""
        return np.array(self.free, dtype=float)

    @property
    def fixed_values(self) -> np.ndarray:
        return np.array(self.fixed, dtype=float)


@dataclass(frozen=True)
class LatticeParams:
    a: float
    b: float
    c: float
    alpha: float
    beta: float
    gamma: float

    def __post_init__(self):
        if min(self.a, self.b, self.c) <= 0:
            raise DomainError(f"lattice lengths must be positive, got {self.a}, {self.b}, {self.c}")
        for name in ("alpha", "beta", "gamma"):
            angle = getattr(self, name)
            if not 0.0 < angle < 180.0:
                raise DomainError(f"lattice angle {name}={angle} outside (0, 180)")
        if np.linalg.eigvalsh(self.gram()).min() <= 0:
            raise DomainError("lattice parameters do not describe a positive-definite cell")

    def gram(self) -> np.ndarray:
        ca, cb, cg = np.cos(np.radians([self.alpha, self.beta, self.gamma]))
        a, b, c = self.a, self.b, self.c
        return np.array(
            [
                [a * a, a * b * cg, a * c * cb],
                [a * b * cg, b * b, b * c * ca],
                [a * c * cb, b * c * ca, c * c],
            ]
        )

    def as_tuple(self) -> Tuple[float, float, float, float, float, float]:
        return (self.a, self.b, self.c, self.alpha, self.beta, self.gamma)


def _check_matrix(L) -> np.ndarray:
    L = np.asarray(L, dtype=float)
    if L.shape != (3, 3):
        raise DomainError(f"lattice matrix must be 3x3, got shape {L.shape}")
    if not np.all(np.isfinite(L)):
        raise DomainError("lattice matrix has non-finite entries")
    return L


def _eigh_descending(J: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    w, U = np.linalg.eigh(J)
    w, U = w[::-1], U[:, ::-1].copy()
    # Largest-magnitude component of each eigenvector is made positive
    pivots = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[pivots, np.arange(3)])
    signs[signs == 0] = 1.0
    return w, U * signs


def _symmetrize(S: np.ndarray) -> np.ndarray:
    return 0.5 * (S + S.T)


def symmetric_log(L: LatticeMatrix) -> np.ndarray:
    """
    Symmetric logarithm S = 1/2 log(L^T L) of any invertible lattice matrix.

    S only depends on L^T L, so it is unchanged by O @ L for any orthogonal O,
    including reflections.
    """
    L = _check_matrix(L)
    if abs(np.linalg.det(L)) < 1e-12:
        raise DomainError("lattice matrix is singular")
    w, U = _eigh_descending(L.T @ L)
    return _symmetrize(0.5 * (U * np.log(w)) @ U.T)


def exp_symmetric(S: np.ndarray) -> np.ndarray:
    S = _symmetrize(np.asarray(S, dtype=float))
    w, U = _eigh_descending(S)
    return _symmetrize((U * np.exp(w)) @ U.T)


def polar_decompose(L: LatticeMatrix) -> Tuple[np.ndarray, np.ndarray]:
    """
    Decompose L = Q exp(S) with Q orthogonal and S symmetric.

    Args:
        L (np.ndarray): 3x3 lattice matrix (columns are lattice vectors), det(L) > 0.

    Returns:
        Tuple[np.ndarray, np.ndarray]: (Q, S).

    Raises:
        DomainError: L is singular or has a negative determinant.
    """
    L = _check_matrix(L)
    det = np.linalg.det(L)
    if det <= 0 or abs(det) < 1e-12:
        raise DomainError(f"polar decomposition needs det(L) > 0, got {det:.6g}")
    w, U = _eigh_descending(L.T @ L)
    S = _symmetrize(0.5 * (U * np.log(w)) @ U.T)
    exp_neg_S = (U * w ** -0.5) @ U.T
    Q = L @ exp_neg_S
    return Q, S


def k_from_symmetric(S: np.ndarray) -> KVector:
    S = np.asarray(S, dtype=float)
    if S.shape != (3, 3):
        raise DomainError(f"symmetric matrix must be 3x3, got shape {S.shape}")
    return np.einsum("ij,kij->k", S, BASES) / BASIS_NORMS


def symmetric_from_k(k: KVector) -> np.ndarray:
    k = np.asarray(k, dtype=float)
    if k.shape != (6,):
        raise DomainError(f"k-vector must have 6 entries, got shape {k.shape}")
    return np.einsum("k,kij->ij", k, BASES)


def encode_lattice(L: LatticeMatrix) -> KVector:
    """k-vector of an invertible lattice matrix (O(3)-invariant)."""
    return k_from_symmetric(symmetric_log(L))


def lattice_from_k(k: KVector) -> LatticeMatrix:
    return exp_symmetric(symmetric_from_k(k))


def params_from_lattice(L: LatticeMatrix) -> LatticeParams:
    L = _check_matrix(L)
    lengths = np.linalg.norm(L, axis=0)

    def angle(i: int, j: int) -> float:
        cos = np.dot(L[:, i], L[:, j]) / (lengths[i] * lengths[j])
        return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))

    return LatticeParams(
        a=float(lengths[0]),
        b=float(lengths[1]),
        c=float(lengths[2]),
        alpha=angle(1, 2),
        beta=angle(0, 2),
        gamma=angle(0, 1),
    )


def lattice_from_params(params: LatticeParams) -> LatticeMatrix:
    """
    Lower-triangular lattice matrix with the given lengths and angles.

    l3 lies along z and l2 in the yz-plane; the diagonal is positive, so det > 0.
    """
    a, b, c = params.a, params.b, params.c
    ca, cb, cg = np.cos(np.radians([params.alpha, params.beta, params.gamma]))
    sa = np.sin(np.radians(params.alpha))
    l3 = np.array([0.0, 0.0, c])
    l2 = np.array([0.0, b * sa, b * ca])
    a_z = a * cb
    a_y = a * (cg - ca * cb) / sa
    a_x = np.sqrt(max(a * a - a_y * a_y - a_z * a_z, 0.0))
    return np.column_stack([np.array([a_x, a_y, a_z]), l2, l3])


def family_of(group_number: int) -> str:
    if not isinstance(group_number, (int, np.integer)) or not 1 <= group_number <= 230:
        raise DomainError(f"space group number must be in 1..230, got {group_number!r}")
    for last, family, _ in _FAMILY_TABLE:
        if group_number <= last:
            return family
    raise DomainError(f"space group number must be in 1..230, got {group_number!r}")


def family_mask(group_number: int) -> FamilyMask:
    family = family_of(group_number)
    free = next(flags for _, name, flags in _FAMILY_TABLE if name == family)
    fixed = [0.0] * 6
    if family == "hexagonal":
        fixed[0] = HEXAGONAL_K1
    return FamilyMask(family=family, free=tuple(bool(f) for f in free), fixed=tuple(fixed))


def mask_for_family(family: str) -> FamilyMask:
    last = {name: last for last, name, _ in _FAMILY_TABLE}
    if family not in last:
        raise DomainError(f"unknown crystal family {family!r}; expected one of {FAMILIES}")
    return family_mask(last[family])


def project_k(k: KVector, mask: FamilyMask) -> KVector:
    k = np.asarray(k, dtype=float)
    return np.where(np.array(mask.free), k, mask.fixed_values)


def lattice_params_check(
    L: LatticeMatrix,
    family: str,
    angle_tol: float = 1e-8,
    length_rtol: float = 1e-10,
) -> bool:
    """
    Check that L has the length/angle shape of `family`.

    Args:
        L (np.ndarray): Lattice matrix.
        family (str): One of FAMILIES.
        angle_tol (float): Absolute tolerance on angles, degrees.
        length_rtol (float): Relative tolerance on length equalities.
    """
    if family not in FAMILIES:
        raise DomainError(f"unknown crystal family {family!r}; expected one of {FAMILIES}")
    p = params_from_lattice(L)

    def right(angle: float) -> bool:
        return abs(angle - 90.0) <= angle_tol

    def same(x: float, y: float) -> bool:
        return abs(x - y) <= length_rtol * max(x, y)

    if family == "triclinic":
        return True
    if family == "monoclinic":
        return right(p.alpha) and right(p.gamma)
    if family == "orthorhombic":
        return right(p.alpha) and right(p.beta) and right(p.gamma)
    if family == "tetragonal":
        return right(p.alpha) and right(p.beta) and right(p.gamma) and same(p.a, p.b)
    if family == "hexagonal":
        return (
            right(p.alpha)
            and right(p.beta)
            and abs(p.gamma - 120.0) <= angle_tol
            and same(p.a, p.b)
        )
    return (
        right(p.alpha)
        and right(p.beta)
        and right(p.gamma)
        and same(p.a, p.b)
        and same(p.b, p.c)
    )


def k_satisfies_mask(k: KVector, mask: FamilyMask, tol: float = 1e-8) -> bool:
    k = np.asarray(k, dtype=float)
    constrained = ~np.array(mask.free)
    return bool(np.all(np.abs(k[constrained] - mask.fixed_values[constrained]) <= tol))


def compatible_families(L: LatticeMatrix, tol: float = 1e-8) -> List[str]:
    """Families whose k-vector constraints the lattice satisfies, most general first."""
    k = encode_lattice(L)
    return [family for family in FAMILIES if k_satisfies_mask(k, mask_for_family(family), tol)]
