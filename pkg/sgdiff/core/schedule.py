"""
Module: sgdiff.core.schedule

Noise schedules for the three diffusion processes.

1) `cosine_schedule(T, s)`
   - beta_t and alpha_bar_t for the lattice (k) and type (A') processes, cosine form
     with offset s; beta clipped to (0, 0.999] and alpha_bar recomputed as a cumulative product.

2) `exp_sigma_schedule(T, sigma_1, sigma_T)`
   - Geometric sigma_t for the wrapped-normal process on basic coordinates.

3) `NoiseSchedule`
   - Bundles both tables (index 0 is the clean state: beta_0 = 0, alpha_bar_0 = 1,
     sigma_0 = 0), the corrector step gamma, the image truncation n_img and the optional
     per-step score weight lambda_t.

Exports:
- `cosine_schedule`, `exp_sigma_schedule`, `NoiseSchedule`, `build_schedule`
"""

import math
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Optional, Tuple

import numpy as np

from sgdiff.core.utils import DomainError

MAX_BETA = 0.999


def cosine_schedule(T: int, s: float = 0.008) -> Tuple[np.ndarray, np.ndarray]:
    """
    Returns:
        (betas, alpha_bars), each of length T + 1 with index 0 the clean state.
    """
    if T < 1:
        raise DomainError(f"cosine schedule needs T >= 1, got {T}")
    steps = np.arange(T + 1, dtype=float)
    f = np.cos(((steps / T + s) / (1.0 + s)) * math.pi / 2.0) ** 2
    ratio = f / f[0]
    betas = np.zeros(T + 1)
    betas[1:] = np.clip(1.0 - ratio[1:] / ratio[:-1], 0.0, MAX_BETA)
    alpha_bars = np.cumprod(1.0 - betas)
    return betas, alpha_bars


def exp_sigma_schedule(T: int, sigma_1: float, sigma_T: float) -> np.ndarray:
    """sigma_t = sigma_1 (sigma_T / sigma_1)^((t-1)/(T-1)); length T + 1 with sigma_0 = 0."""
    if T < 2:
        raise DomainError(f"exponential sigma schedule needs T >= 2, got {T}")
    if not 0.0 < sigma_1 < sigma_T:
        raise DomainError(f"need 0 < sigma_1 < sigma_T, got {sigma_1}, {sigma_T}")
    sigmas = np.zeros(T + 1)
    exponent = np.arange(T, dtype=float) / (T - 1)
    sigmas[1:] = sigma_1 * (sigma_T / sigma_1) ** exponent
    sigmas[1], sigmas[T] = sigma_1, sigma_T
    return sigmas


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    s: float = 0.008
    sigma_1: float = 0.005
    sigma_T: float = 0.5
    corrector_gamma: float = 5e-6
    n_img: int = 3
    score_weight: Optional[np.ndarray] = field(default=None, repr=False)
    betas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)
    sigmas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.corrector_gamma <= 0:
            raise DomainError(f"corrector gamma must be positive, got {self.corrector_gamma}")
        if self.n_img < 1:
            raise DomainError(f"n_img must be >= 1, got {self.n_img}")
        betas, alpha_bars = cosine_schedule(self.T, self.s)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        object.__setattr__(self, "sigmas", exp_sigma_schedule(self.T, self.sigma_1, self.sigma_T))
        if self.score_weight is not None:
            weight = np.asarray(self.score_weight, dtype=float)
            if weight.shape != (self.T + 1,):
                raise DomainError(f"score weight table must have length {self.T + 1}")
            object.__setattr__(self, "score_weight", weight)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    def posterior_std(self, t: int) -> float:
        """Standard deviation of q(x_{t-1} | x_t, x_0); zero at t = 1."""
        variance = self.betas[t] * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t])
        return math.sqrt(max(variance, 0.0))

    def lam(self, t: int) -> float:
        """Score weight lambda_t, or 1 when no table has been attached."""
        return 1.0 if self.score_weight is None else float(self.score_weight[t])

    def with_score_weight(self, table: np.ndarray) -> "NoiseSchedule":
        return replace(self, score_weight=np.asarray(table, dtype=float))

    def params(self) -> Dict[str, Any]:
        return {
            "T": self.T,
            "s": self.s,
            "sigma_1": self.sigma_1,
            "sigma_T": self.sigma_T,
            "gamma": self.corrector_gamma,
            "n_img": self.n_img,
        }


def build_schedule(section: Optional[Dict[str, Any]] = None) -> NoiseSchedule:
    """Build a schedule from the `schedule` section of a run config."""
    section = section or {}
    return NoiseSchedule(
        T=int(section.get("T", 1000)),
        s=float(section.get("s", 0.008)),
        sigma_1=float(section.get("sigma_1", 0.005)),
        sigma_T=float(section.get("sigma_T", 0.5)),
        corrector_gamma=float(section.get("gamma", 5e-6)),
        n_img=int(section.get("n_img", 3)),
    )
