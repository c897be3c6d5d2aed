"""
Module: sgdiff.core.sampler

Reverse-time generation under space-group constraints.

1) Prior
   - k_T: masked standard normal with constrained dimensions at their family values.
   - F'_T: uniform on [0, 1)^3 projected onto each site's subspace.
   - A'_T: standard normal (ab initio) or the fixed one-hot types (structure prediction).

2) Reverse step t -> t-1 (predictor-corrector)
   - Corrector: one Langevin step on F' with step gamma (sigma_t / sigma_1)^2,
     preconditioned by the site covariance pinv(R0) pinv(R0)^T.
   - Predictor: ancestral update of k and A' with the posterior variance, and the
     variance-exploding reverse step on F'.
   - After every update k is re-projected onto its family and F' onto its subspaces.

3) Entry points
   - `sample` runs the full chain from T; `refine` noises a template to t_start first.
   - `sample_assignment` draws a (group, Wyckoff letters) pair from a training set.

Exports:
- `SampleResult`, `sample`, `refine`, `sample_assignment`
- `ChainTask`, `run_chain` (one picklable chain for `scheduler.run_chains`)
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import trange

from sgdiff.core.crystal import Crystal
from sgdiff.core.diffusion import (
    Denoiser,
    DiffusionState,
    EncodedCrystal,
    decode_state,
    encode_crystal,
    noised_state,
)
from sgdiff.core.elements import TypeVocabulary
from sgdiff.core.lattice import project_k
from sgdiff.core.schedule import NoiseSchedule
from sgdiff.core.spacegroup import SiteLayout
from sgdiff.core.utils import DomainError

logger = logging.getLogger(__name__)

StateCallback = Callable[[DiffusionState], None]


@dataclass
class SampleResult:
    crystal: Crystal
    state: DiffusionState
    trajectory: List[Crystal] = field(default_factory=list)


def _site_noise(layout: SiteLayout, rng: np.random.Generator) -> np.ndarray:
    return np.einsum("sij,sj->si", layout.projectors, rng.standard_normal((layout.n_sites, 3)))


def _precondition(layout: SiteLayout, score: np.ndarray) -> np.ndarray:
    covariance = np.einsum("sij,skj->sik", layout.projectors, layout.projectors)
    return np.einsum("sij,sj->si", covariance, score)


def prior_state(
    layout: SiteLayout,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    fixed_types: Optional[np.ndarray] = None,
    n_types: int = 0,
) -> DiffusionState:
    mask = layout.mask
    k = project_k(mask.m * rng.standard_normal(6), mask)
    coords = layout.project(rng.uniform(size=(layout.n_sites, 3)))
    if fixed_types is not None:
        types = np.asarray(fixed_types, dtype=float)
    elif n_types:
        types = rng.standard_normal((layout.n_sites, n_types))
    else:
        types = None
    return DiffusionState(schedule.T, k, coords, types)


def reverse_chain(
    state: DiffusionState,
    layout: SiteLayout,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    types_fixed: bool = True,
    callback: Optional[StateCallback] = None,
    record_every: int = 0,
    progress: bool = False,
) -> Tuple[DiffusionState, List[DiffusionState]]:
    """
    Run the predictor-corrector chain from `state.t` down to 0.

    Returns:
        (final state at t = 0, recorded intermediate states including the start state)
    """
    mask = layout.mask
    recorded: List[DiffusionState] = [state] if record_every > 0 else []
    for t in trange(state.t, 0, -1, disable=not progress, desc="sampling", leave=False):
        sigma_t, sigma_prev = schedule.sigmas[t], schedule.sigmas[t - 1]
        inv_sqrt_lam = 1.0 / math.sqrt(schedule.lam(t))

        # corrector
        out = denoiser.denoise(state, layout).numpy()
        step = schedule.corrector_gamma * (sigma_t / schedule.sigma_1) ** 2
        noise = _site_noise(layout, rng) if t > 1 else 0.0
        coords = state.basic_coords + step * _precondition(layout, out.eps_Fprime * inv_sqrt_lam)
        coords = layout.project(coords + math.sqrt(2.0 * step) * noise)
        state = replace(state, basic_coords=coords)

        # predictor
        out = denoiser.denoise(state, layout).numpy()
        alpha = schedule.alphas[t]
        c0 = 1.0 / math.sqrt(alpha)
        c1 = schedule.betas[t] / math.sqrt(1.0 - schedule.alpha_bars[t])
        post_std = schedule.posterior_std(t)

        k = c0 * (state.k - c1 * mask.m * out.eps_k) + post_std * mask.m * rng.standard_normal(6)
        k = project_k(k, mask)

        step = sigma_t**2 - sigma_prev**2
        std = math.sqrt(sigma_prev**2 * step / sigma_t**2)
        coords = state.basic_coords + step * _precondition(layout, out.eps_Fprime * inv_sqrt_lam)
        coords = layout.project(coords + std * _site_noise(layout, rng))

        types = state.basic_types
        if not types_fixed and types is not None:
            types = c0 * (types - c1 * out.eps_Aprime) + post_std * rng.standard_normal(types.shape)

        state = DiffusionState(t - 1, k, coords, types)
        if callback is not None:
            callback(state)
        if record_every > 0 and (t - 1) % record_every == 0:
            recorded.append(state)
    return state, recorded


def sample(
    layout: SiteLayout,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    fixed_species: Optional[Sequence[str]] = None,
    vocabulary: Optional[TypeVocabulary] = None,
    callback: Optional[StateCallback] = None,
    record_every: int = 0,
    progress: bool = False,
) -> SampleResult:
    """
    Generate one crystal for a fixed (group, Wyckoff letters) layout.

    Args:
        layout (SiteLayout): Space group and Wyckoff assignment.
        denoiser (Denoiser): Network or oracle with `denoise(state, layout)`.
        schedule (NoiseSchedule): Noise tables.
        rng (np.random.Generator): Per-chain generator.
        fixed_species (Sequence[str] | None): One element per basic site (structure
            prediction). When None, types are generated and decoded by argmax (ab initio).
        vocabulary (TypeVocabulary | None): Type classes; required for ab initio.
        callback: Called with every intermediate state.
        record_every (int): Keep every n-th state as a Crystal in the trajectory.
        progress (bool): Show a progress bar over reverse steps.
    """
    if fixed_species is not None:
        fixed_species = tuple(fixed_species)
        if len(fixed_species) != layout.n_sites:
            raise DomainError(f"{len(fixed_species)} species for {layout.n_sites} Wyckoff sites")
        vocabulary = vocabulary or TypeVocabulary.from_species(fixed_species)
        state = prior_state(layout, schedule, rng, fixed_types=vocabulary.one_hot(fixed_species))
    elif vocabulary is None:
        raise DomainError("ab initio sampling needs a type vocabulary")
    else:
        state = prior_state(layout, schedule, rng, n_types=vocabulary.size)

    logger.debug("Sampling group %d letters %s", layout.group.number, "".join(layout.letters))
    final, recorded = reverse_chain(
        state,
        layout,
        denoiser,
        schedule,
        rng,
        types_fixed=fixed_species is not None,
        callback=callback,
        record_every=record_every,
        progress=progress,
    )
    trajectory = [decode_state(s, layout, vocabulary, fixed_species) for s in recorded]
    return SampleResult(decode_state(final, layout, vocabulary, fixed_species), final, trajectory)


def refine(
    template: Crystal,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    t_start: int,
    vocabulary: Optional[TypeVocabulary] = None,
    callback: Optional[StateCallback] = None,
    record_every: int = 0,
    progress: bool = False,
) -> SampleResult:
    """
    Noise the template's lattice and basic coordinates to `t_start`, then sample back to 0
    with the template's group, Wyckoff letters and species held fixed.
    """
    if not 0 <= t_start <= schedule.T:
        raise DomainError(f"t_start must lie in [0, {schedule.T}], got {t_start}")
    if template.annotation is None:
        raise DomainError("refinement needs an annotated template")
    species = template.annotation.basic_species
    vocabulary = vocabulary or TypeVocabulary.from_species(species)
    encoded: EncodedCrystal = encode_crystal(template, vocabulary)
    if t_start == 0:
        state = DiffusionState(0, encoded.k, encoded.basic_coords, encoded.basic_types)
        return SampleResult(template, state, [template] if record_every > 0 else [])
    state = noised_state(encoded, schedule, t_start, rng, fixed_types=True)
    final, recorded = reverse_chain(
        state,
        encoded.layout,
        denoiser,
        schedule,
        rng,
        types_fixed=True,
        callback=callback,
        record_every=record_every,
        progress=progress,
    )
    trajectory = [decode_state(s, encoded.layout, vocabulary, species) for s in recorded]
    return SampleResult(decode_state(final, encoded.layout, vocabulary, species), final, trajectory)


def sample_assignment(dataset: Sequence[Crystal], rng: np.random.Generator) -> Tuple[int, Tuple[str, ...]]:
    """Draw a (group, Wyckoff letters) pair with its empirical frequency in `dataset`."""
    counts = Counter(
        (c.annotation.group, tuple(c.annotation.letters)) for c in dataset if c.annotation is not None
    )
    if not counts:
        raise DomainError("no annotated crystals to draw a Wyckoff assignment from")
    keys = sorted(counts)
    weights = np.array([counts[key] for key in keys], dtype=float)
    choice = rng.choice(len(keys), p=weights / weights.sum())
    return keys[int(choice)]


@dataclass(frozen=True, eq=False)
class ChainTask:
    """One independent chain: a fresh sample for `layout`, or a refinement of `template`."""

    denoiser: Denoiser
    schedule: NoiseSchedule
    seed: np.random.SeedSequence
    layout: Optional[SiteLayout] = None
    fixed_species: Optional[Tuple[str, ...]] = None
    vocabulary: Optional[TypeVocabulary] = None
    template: Optional[Crystal] = None
    t_start: int = 0
    record_every: int = 0


def run_chain(task: ChainTask) -> SampleResult:
    rng = np.random.default_rng(task.seed)
    if task.template is not None:
        return refine(
            task.template, task.denoiser, task.schedule, rng, task.t_start,
            vocabulary=task.vocabulary, record_every=task.record_every,
        )
    if task.layout is None:
        raise DomainError("a chain needs a layout or a template")
    return sample(
        task.layout, task.denoiser, task.schedule, rng,
        fixed_species=task.fixed_species, vocabulary=task.vocabulary, record_every=task.record_every,
    )
