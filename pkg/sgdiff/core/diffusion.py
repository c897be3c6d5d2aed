"""
Module: sgdiff.core.diffusion

Forward processes, scores and the training objective for the three coupled diffusion
processes on a space-group-annotated crystal:

1) Lattice k (6,)
   - Variance-preserving process on the free dimensions only; constrained dimensions keep
     their family values at every step.

2) Basic coordinates F' (N', 3)
   - Wrapped normal on the torus. Noise is drawn in 3D and projected per site by
     pinv(R0) of the site's Wyckoff position; `wn_score` is the exact gradient of the
     truncated image sum for the projected covariance.

3) Basic types A' (N', h)
   - Variance-preserving process on one-hot rows (ab initio mode only).

4) Objective
   - `diffusion_loss` draws noise, runs a denoiser and returns the weighted combination
     of lattice, coordinate and type terms with the post- or pre-average coordinate loss.
   - `lambda_table` precomputes the per-step score weight by Monte-Carlo and caches it.

Exports:
- `EncodedCrystal`, `encode_crystal`, `DiffusionState`, `decode_state`
- `forward_k`, `forward_F`, `forward_A`
- `wn_log_density`, `wn_score`, `isotropic_wn_score`, `lambda_table`, `ensure_score_weight`
- `DenoiserOutput`, `Denoiser`, `OracleDenoiser`
- `LossWeights`, `LossTerms`, `diffusion_loss`
"""

import itertools
import json
import logging
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Optional, Protocol, Tuple, Union

import numpy as np
import torch
from scipy.special import logsumexp, softmax

from sgdiff.core.crystal import Crystal
from sgdiff.core.elements import TypeVocabulary
from sgdiff.core.lattice import FamilyMask, lattice_from_k, project_k
from sgdiff.core.schedule import NoiseSchedule
from sgdiff.core.spacegroup import SiteLayout, expand_structure
from sgdiff.core.storage import canonical_json, compute_digest, read_blob, write_blob
from sgdiff.core.utils import DomainError, StoreError, wrap_frac, wrapped_delta

logger = logging.getLogger(__name__)

F_LOSS_MODES = ("post", "pre")


@dataclass(frozen=True, eq=False)
class EncodedCrystal:
    layout: SiteLayout
    k: np.ndarray
    basic_coords: np.ndarray
    basic_species: Tuple[str, ...]
    basic_types: Optional[np.ndarray] = None


def encode_crystal(crystal: Crystal, vocabulary: Optional[TypeVocabulary] = None) -> EncodedCrystal:
    """Lattice k, basic coordinates and (optionally) one-hot basic types of an annotated crystal."""
    if crystal.annotation is None:
        raise DomainError("diffusion needs a crystal with a space-group/Wyckoff annotation")
    layout = SiteLayout.from_crystal(crystal)
    annotation = crystal.annotation
    return EncodedCrystal(
        layout=layout,
        k=project_k(crystal.k, layout.mask),
        basic_coords=layout.project(annotation.basic_coords),
        basic_species=annotation.basic_species,
        basic_types=None if vocabulary is None else vocabulary.one_hot(annotation.basic_species),
    )


@dataclass(frozen=True, eq=False)
class DiffusionState:
    t: int
    k: np.ndarray
    basic_coords: np.ndarray
    basic_types: Optional[np.ndarray] = None


def decode_state(
    state: DiffusionState,
    layout: SiteLayout,
    vocabulary: Optional[TypeVocabulary] = None,
    basic_species: Optional[Tuple[str, ...]] = None,
) -> Crystal:
    """Expand a state into a Crystal; species come from `basic_species` or argmax over `vocabulary`."""
    if basic_species is None:
        if vocabulary is None or state.basic_types is None:
            raise DomainError("decoding needs fixed species or a type vocabulary")
        basic_species = vocabulary.decode(state.basic_types)
    return expand_structure(
        basic_species,
        layout.project(state.basic_coords),
        layout.letters,
        lattice_from_k(state.k),
        layout.group,
    )


def forward_k(k0: np.ndarray, mask: FamilyMask, t: int, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    m = mask.m
    ab = schedule.alpha_bars[t]
    return m * (math.sqrt(ab) * k0 + math.sqrt(1.0 - ab) * noise) + (1.0 - m) * k0


def forward_F(
    basic_coords: np.ndarray, layout: SiteLayout, t: int, noise: np.ndarray, schedule: NoiseSchedule
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Returns:
        (F'_t, eps') with eps' = sigma_t pinv(R0) z per site; F'_t = wrap(F'_0 + eps').
    """
    eps = schedule.sigmas[t] * np.einsum("sij,sj->si", layout.projectors, noise)
    return wrap_frac(basic_coords + eps), eps


def forward_A(basic_types: np.ndarray, t: int, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    ab = schedule.alpha_bars[t]
    return math.sqrt(ab) * basic_types + math.sqrt(1.0 - ab) * noise


@lru_cache(maxsize=8)
def _image_grid(dof: int, n_img: int) -> np.ndarray:
    grid = np.array(list(itertools.product(range(-n_img, n_img + 1), repeat=dof)), dtype=float)
    grid.setflags(write=False)
    return grid


def _image_terms(delta: np.ndarray, precision: np.ndarray, n_img: int) -> Tuple[np.ndarray, np.ndarray]:
    x = delta[None, :] + _image_grid(len(delta), n_img)
    quad = -0.5 * np.einsum("ij,jk,ik->i", x, precision, x)
    return x, quad


def wn_log_density(delta: np.ndarray, precision: np.ndarray, n_img: int = 3) -> float:
    """Unnormalized log of the truncated image sum of N(0, precision^-1) at `delta`."""
    _, quad = _image_terms(np.asarray(delta, dtype=float), precision, n_img)
    return float(logsumexp(quad))


def _wn_gradient(delta: np.ndarray, precision: np.ndarray, n_img: int) -> np.ndarray:
    x, quad = _image_terms(delta, precision, n_img)
    weights = softmax(quad)
    return -(weights[:, None] * (x @ precision)).sum(axis=0)


def wn_score(
    basic_coords_t: np.ndarray,
    basic_coords_0: np.ndarray,
    sigma: float,
    layout: SiteLayout,
    n_img: int = 3,
) -> np.ndarray:
    """
    Gradient of log q'(F'_t | F'_0) per site, shape (N', 3); zero on constrained axes.

    The projected noise of a site has precision R_f^T R_f / sigma^2 on its free axes f.
    """
    out = np.zeros_like(np.asarray(basic_coords_t, dtype=float))
    for s, position in enumerate(layout.positions):
        if position.dof == 0:
            continue
        axes = position.free_axes
        delta = wrapped_delta(basic_coords_t[s, axes], basic_coords_0[s, axes])
        out[s, axes] = _wn_gradient(delta, position.metric / sigma**2, n_img)
    return out


def isotropic_wn_score(x: np.ndarray, sigma: float, n_img: int = 3) -> np.ndarray:
    """Elementwise score of the 1D wrapped normal N_w(0, sigma^2)."""
    x = np.asarray(x, dtype=float)
    shifted = x[..., None] + np.arange(-n_img, n_img + 1, dtype=float)
    weights = softmax(-0.5 * shifted**2 / sigma**2, axis=-1)
    return -(weights * shifted).sum(axis=-1) / sigma**2


def _compute_lambda(schedule: NoiseSchedule, samples: int, seed: int) -> np.ndarray:
    z = np.random.default_rng(seed).standard_normal(samples)
    table = np.zeros(schedule.T + 1)
    for t in range(1, schedule.T + 1):
        sigma = schedule.sigmas[t]
        score = isotropic_wn_score(wrapped_delta(sigma * z, 0.0), sigma, schedule.n_img)
        table[t] = 1.0 / (3.0 * np.mean(score**2))
    return table


def lambda_table(
    schedule: NoiseSchedule,
    samples: int = 10_000,
    seed: int = 0,
    cache_dir: Optional[Union[str, Path]] = None,
) -> np.ndarray:
    """
    lambda_t = 1 / E||grad log N_w(0, sigma_t^2 I_3)||^2 by Monte-Carlo, index 0 unused (0).

    With `cache_dir`, the table is stored as a gzip JSON blob keyed by the digest of the
    schedule parameters, sample count and seed.
    """
    key = {"kind": "lambda_table", "samples": samples, "seed": seed, **schedule.params()}
    digest = compute_digest(canonical_json(key))
    if cache_dir is not None:
        cache_dir = Path(cache_dir)
        try:
            doc = json.loads(read_blob(digest, cache_dir))
            logger.debug("Score-weight cache hit %s", digest[:12])
            return np.array(doc["table"], dtype=float)
        except StoreError:
            logger.info("Score-weight cache miss %s; computing %d steps", digest[:12], schedule.T)
    table = _compute_lambda(schedule, samples, seed)
    if cache_dir is not None:
        write_blob(digest, canonical_json({"key": key, "table": table.tolist()}), cache_dir)
    return table


def ensure_score_weight(
    schedule: NoiseSchedule,
    samples: int = 10_000,
    seed: int = 0,
    cache_dir: Optional[Union[str, Path]] = None,
) -> NoiseSchedule:
    if schedule.score_weight is not None:
        return schedule
    return schedule.with_score_weight(lambda_table(schedule, samples, seed, cache_dir))


@dataclass(frozen=True, eq=False)
class DenoiserOutput:
    """
    Denoiser predictions for one state. Fields are numpy arrays or torch tensors.

    eps_Fprime is the normalized score sqrt(lambda_t) * grad log q'. `atom_eps_F` holds the
    per-atom outputs already pulled back to their site's parameter space, shape (N, 3).
    """

    eps_k: object
    eps_Fprime: object
    eps_Aprime: object
    atom_eps_F: Optional[object] = None

    def numpy(self) -> "DenoiserOutput":
        def convert(value):
            if value is None:
                return None
            if isinstance(value, torch.Tensor):
                return value.detach().cpu().numpy()
            return np.asarray(value, dtype=float)

        return DenoiserOutput(
            convert(self.eps_k), convert(self.eps_Fprime), convert(self.eps_Aprime), convert(self.atom_eps_F)
        )


class Denoiser(Protocol):
    def denoise(self, state: DiffusionState, layout: SiteLayout) -> DenoiserOutput:
        ...


class OracleDenoiser:
    """Analytic noise predictions toward a known target; exact for the forward processes."""

    def __init__(self, target: EncodedCrystal, schedule: NoiseSchedule):
        self.target = target
        self.schedule = schedule

    def denoise(self, state: DiffusionState, layout: SiteLayout) -> DenoiserOutput:
        t = state.t
        ab = self.schedule.alpha_bars[t]
        scale = math.sqrt(1.0 - ab)
        eps_k = layout.mask.m * (state.k - math.sqrt(ab) * self.target.k) / scale
        score = wn_score(
            state.basic_coords, self.target.basic_coords, self.schedule.sigmas[t], layout, self.schedule.n_img
        )
        eps_F = math.sqrt(self.schedule.lam(t)) * score
        if state.basic_types is not None and self.target.basic_types is not None:
            eps_A = (state.basic_types - math.sqrt(ab) * self.target.basic_types) / scale
        else:
            eps_A = np.zeros((layout.n_sites, 0 if state.basic_types is None else state.basic_types.shape[1]))
        return DenoiserOutput(eps_k, eps_F, eps_A, eps_F[layout.site_index])


@dataclass(frozen=True)
class LossWeights:
    k: float = 1.0
    F: float = 1.0
    A: float = 20.0


@dataclass
class LossTerms:
    total: torch.Tensor
    k: float
    F: float
    A: float
    t: int

    def as_dict(self) -> dict:
        return {"t": self.t, "total": float(self.total.detach()), "k": self.k, "F": self.F, "A": self.A}


def _tensor(value) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value
    return torch.as_tensor(np.asarray(value, dtype=float), dtype=torch.float64)


def diffusion_loss(
    encoded: EncodedCrystal,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    t: Optional[int] = None,
    weights: LossWeights = LossWeights(),
    f_loss: str = "post",
    fixed_types: bool = False,
) -> LossTerms:
    """
    One-sample estimate of the combined objective.

    Args:
        encoded (EncodedCrystal): Clean annotated crystal; needs `basic_types` unless `fixed_types`.
        denoiser (Denoiser): Anything with `denoise(state, layout)`.
        schedule (NoiseSchedule): Noise tables (score weight attached for training).
        rng (np.random.Generator): Source of t (when not given) and all noise.
        t (int | None): Diffusion step in 1..T.
        weights (LossWeights): Lattice, coordinate and type weights.
        f_loss (str): "post" averages per-atom residuals over each orbit; "pre" compares the
            orbit-averaged output.
        fixed_types (bool): Types are given (structure prediction); the type term is dropped.
    """
    if f_loss not in F_LOSS_MODES:
        raise DomainError(f"f_loss must be one of {F_LOSS_MODES}, got {f_loss!r}")
    if not fixed_types and encoded.basic_types is None:
        raise DomainError("type diffusion needs one-hot basic types; encode with a vocabulary")
    if t is None:
        t = int(rng.integers(1, schedule.T + 1))
    layout = encoded.layout

    eps_k = rng.standard_normal(6)
    k_t = forward_k(encoded.k, layout.mask, t, eps_k, schedule)
    F_t, _ = forward_F(encoded.basic_coords, layout, t, rng.standard_normal((layout.n_sites, 3)), schedule)
    target_F = math.sqrt(schedule.lam(t)) * wn_score(
        F_t, encoded.basic_coords, schedule.sigmas[t], layout, schedule.n_img
    )
    if fixed_types:
        A_t, eps_A = encoded.basic_types, None
    else:
        eps_A = rng.standard_normal(encoded.basic_types.shape)
        A_t = forward_A(encoded.basic_types, t, eps_A, schedule)

    out = denoiser.denoise(DiffusionState(t, k_t, F_t, A_t), layout)

    loss_k = torch.sum((_tensor(layout.mask.m * eps_k) - _tensor(out.eps_k)) ** 2)
    target = _tensor(target_F)
    if f_loss == "post" and out.atom_eps_F is not None:
        site_index = torch.as_tensor(layout.site_index)
        per_atom = torch.sum((target[site_index] - _tensor(out.atom_eps_F)) ** 2, dim=1)
        per_site = torch.zeros(layout.n_sites, dtype=per_atom.dtype).index_add(0, site_index, per_atom)
        loss_F = torch.mean(per_site / torch.as_tensor(layout.multiplicities, dtype=per_atom.dtype))
    else:
        loss_F = torch.mean(torch.sum((target - _tensor(out.eps_Fprime)) ** 2, dim=1))
    if eps_A is None:
        loss_A = torch.zeros((), dtype=torch.float64)
    else:
        loss_A = torch.mean(torch.sum((_tensor(eps_A) - _tensor(out.eps_Aprime)) ** 2, dim=1))

    total = weights.k * loss_k + weights.F * loss_F + weights.A * loss_A
    return LossTerms(total, float(loss_k.detach()), float(loss_F.detach()), float(loss_A.detach()), t)


def state_from_encoded(encoded: EncodedCrystal, t: int = 0) -> DiffusionState:
    return DiffusionState(t, encoded.k.copy(), encoded.basic_coords.copy(), encoded.basic_types)


def noised_state(
    encoded: EncodedCrystal,
    schedule: NoiseSchedule,
    t: int,
    rng: np.random.Generator,
    fixed_types: bool = True,
) -> DiffusionState:
    """Sample q(M_t | M_0) for the lattice and coordinates (and types unless fixed)."""
    layout = encoded.layout
    k_t = forward_k(encoded.k, layout.mask, t, rng.standard_normal(6), schedule)
    F_t, _ = forward_F(encoded.basic_coords, layout, t, rng.standard_normal((layout.n_sites, 3)), schedule)
    A_t = encoded.basic_types
    if not fixed_types and A_t is not None:
        A_t = forward_A(A_t, t, rng.standard_normal(A_t.shape), schedule)
    return replace(
        state_from_encoded(encoded),
        t=t,
        k=project_k(k_t, layout.mask),
        basic_coords=layout.project(F_t),
        basic_types=A_t,
    )
