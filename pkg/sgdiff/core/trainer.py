"""
Module: sgdiff.core.trainer

Training loop for the score network.

1) `TrainSettings` mirrors the `train` and `loss` config sections.
2) `train(dataset, schedule, settings)` checks that every crystal is annotated and
   symmetric, builds the vocabulary and network, and runs mini-batch epochs with SGD
   (momentum) or Adam, recording one loss-trace row per optimizer step.
3) `evaluate_loss` gives a fixed-noise estimate of the objective for before/after checks.

Key Functions:
- `train`, `evaluate_loss`, `make_optimizer`
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from tqdm import trange

from sgdiff.core.crystal import Crystal
from sgdiff.core.denoiser import DenoiserConfig, ScoreNetwork
from sgdiff.core.diffusion import EncodedCrystal, LossWeights, diffusion_loss, encode_crystal
from sgdiff.core.elements import TypeVocabulary
from sgdiff.core.schedule import NoiseSchedule
from sgdiff.core.spacegroup import verify_symmetry
from sgdiff.core.utils import DomainError

logger = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 200
    lr: float = 1e-3
    momentum: float = 0.9
    optimizer: str = "sgd"
    batch_size: int = 4
    log_every: int = 10
    f_loss: str = "post"
    weights: LossWeights = field(default_factory=LossWeights)
    fixed_types: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise DomainError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise DomainError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise DomainError(f"learning rate must be positive, got {self.lr}")


@dataclass
class TrainResult:
    network: ScoreNetwork
    vocabulary: TypeVocabulary
    trace: List[Dict[str, float]]


def make_optimizer(network: torch.nn.Module, settings: TrainSettings) -> torch.optim.Optimizer:
    if settings.optimizer == "adam":
        return torch.optim.Adam(network.parameters(), lr=settings.lr)
    return torch.optim.SGD(network.parameters(), lr=settings.lr, momentum=settings.momentum)


def _check_dataset(dataset: Sequence[Crystal]) -> None:
    if not dataset:
        raise DomainError("training set is empty")
    for i, crystal in enumerate(dataset):
        if crystal.annotation is None:
            raise DomainError(f"training crystal {i} has no space-group/Wyckoff annotation")
        if not verify_symmetry(crystal, crystal.annotation.group):
            raise DomainError(f"training crystal {i} is not symmetric under group {crystal.annotation.group}")


def evaluate_loss(
    network: ScoreNetwork,
    encoded: Sequence[EncodedCrystal],
    schedule: NoiseSchedule,
    settings: TrainSettings,
    draws: int = 64,
    seed: int = 12345,
) -> float:
    """Mean combined loss over `draws` fixed (t, noise) samples per crystal."""
    rng = np.random.default_rng(seed)
    was_training = network.training
    network.eval()
    total = 0.0
    with torch.no_grad():
        for item in encoded:
            for _ in range(draws):
                terms = diffusion_loss(
                    item, network, schedule, rng, weights=settings.weights,
                    f_loss=settings.f_loss, fixed_types=settings.fixed_types,
                )
                total += float(terms.total)
    network.train(was_training)
    return total / (draws * len(encoded))


def train(
    dataset: Sequence[Crystal],
    schedule: NoiseSchedule,
    settings: TrainSettings = TrainSettings(),
    config: Optional[DenoiserConfig] = None,
    network: Optional[ScoreNetwork] = None,
    vocabulary: Optional[TypeVocabulary] = None,
    progress: bool = False,
) -> TrainResult:
    """
    Fit the score network on annotated crystals.

    Args:
        dataset (Sequence[Crystal]): Annotated, symmetry-verified crystals.
        schedule (NoiseSchedule): Noise tables with the score weight attached.
        settings (TrainSettings): Optimizer, epochs, loss form and seed.
        config (DenoiserConfig | None): Network sizes; `n_types` is taken from the vocabulary.
        network (ScoreNetwork | None): Continue training an existing network.
        vocabulary (TypeVocabulary | None): Defaults to the elements of `dataset`.
        progress (bool): Show a progress bar over epochs.

    Returns:
        TrainResult: Trained network, vocabulary and the per-step loss trace.
    """
    _check_dataset(dataset)
    vocabulary = vocabulary or TypeVocabulary.from_crystals(dataset)
    if network is None:
        base = config or DenoiserConfig(n_types=vocabulary.size)
        config = DenoiserConfig(
            n_types=vocabulary.size,
            layers=base.layers,
            hidden=base.hidden,
            fourier=base.fourier,
            time_dim=base.time_dim,
        )
        network = ScoreNetwork(config, seed=settings.seed)
    elif network.config.n_types != vocabulary.size:
        raise DomainError("network type count does not match the vocabulary")

    encoded = [encode_crystal(c, vocabulary) for c in dataset]
    optimizer = make_optimizer(network, settings)
    rng = np.random.default_rng(settings.seed)
    trace: List[Dict[str, float]] = []
    network.train()

    step = 0
    for epoch in trange(settings.epochs, disable=not progress, desc="training"):
        order = rng.permutation(len(encoded))
        for start in range(0, len(order), settings.batch_size):
            batch = order[start : start + settings.batch_size]
            optimizer.zero_grad()
            terms = [
                diffusion_loss(
                    encoded[i], network, schedule, rng, weights=settings.weights,
                    f_loss=settings.f_loss, fixed_types=settings.fixed_types,
                )
                for i in batch
            ]
            total = sum(term.total for term in terms) / len(terms)
            total.backward()
            optimizer.step()
            trace.append(
                {
                    "step": step,
                    "epoch": epoch,
                    "total": float(total.detach()),
                    "k": float(np.mean([term.k for term in terms])),
                    "F": float(np.mean([term.F for term in terms])),
                    "A": float(np.mean([term.A for term in terms])),
                }
            )
            step += 1
        if settings.log_every and (epoch + 1) % settings.log_every == 0:
            recent = trace[-max(1, len(encoded) // settings.batch_size) :]
            logger.info("epoch %d loss %.6g", epoch + 1, np.mean([row["total"] for row in recent]))

    network.eval()
    return TrainResult(network, vocabulary, trace)
