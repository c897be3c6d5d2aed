"""
Module: sgdiff.core.denoiser

Message-passing score network over the fully connected graph of expanded atoms.

1) Inputs
   - k (6,) only, so outputs never depend on lattice orientation.
   - Relative fractional coordinates f_j - f_i wrapped to the nearest image and lifted by
     the Fourier embedding (sin/cos of 2 pi m f per component).
   - Atom types (one-hot rows) and a sinusoidal embedding of the step t.

2) Layers
   - h_i <- h_i + phi_h([h_i, sum_j phi_m([h_i, h_j, k, psi(f_j - f_i)])]).

3) Constrained heads
   - Lattice: phi_k(mean_i h_i) masked by the family.
   - Coordinates: per-atom phi_F(h_i) pulled back by pinv(R_i), projected onto the site
     subspace and averaged over the orbit.
   - Types: per-atom phi_A(h_i) averaged over the orbit.

4) Parameters
   - `backward` returns autograd gradients of any scalar loss.
   - Checkpoint documents record config, seed, vocabulary and flat float64 tensors; the
     gzip/canonical-JSON container is byte-stable across save -> load -> save.

Exports:
- `DenoiserConfig`, `ScoreNetwork`, `fourier_embed`, `time_embedding`
- `backward`, `state_to_document`, `state_from_document`, `save_checkpoint`, `load_checkpoint`
"""

import gzip
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, Union

import numpy as np
import torch
from torch import nn

from sgdiff.core.diffusion import DenoiserOutput, DiffusionState
from sgdiff.core.elements import TypeVocabulary
from sgdiff.core.spacegroup import SiteLayout
from sgdiff.core.storage import canonical_json, gzip_bytes
from sgdiff.core.utils import DocumentError, DomainError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "sgdiff-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    n_types: int
    layers: int = 3
    hidden: int = 64
    fourier: int = 32
    time_dim: int = 64

    def __post_init__(self):
        if self.n_types < 1:
            raise DomainError(f"n_types must be >= 1, got {self.n_types}")
        if self.layers < 1:
            raise DomainError(f"layers must be >= 1, got {self.layers}")
        if self.hidden < 1:
            raise DomainError(f"hidden must be >= 1, got {self.hidden}")
        if self.fourier < 2 or self.fourier % 2:
            raise DomainError(f"fourier must be an even number >= 2, got {self.fourier}")
        if self.time_dim < 4 or self.time_dim % 2:
            raise DomainError(f"time_dim must be an even number >= 4, got {self.time_dim}")

    @classmethod
    def full_scale(cls, n_types: int) -> "DenoiserConfig":
        return cls(n_types=n_types, layers=6, hidden=512, fourier=128, time_dim=512)

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DenoiserConfig":
        return cls(**{key: int(data[key]) for key in ("n_types", "layers", "hidden", "fourier", "time_dim")})


def fourier_embed(f_rel, K: int) -> torch.Tensor:
    """
    Channel 2m is sin(2 pi m f), channel 2m+1 is cos(2 pi m f), m = 0 .. K/2 - 1.

    Args:
        f_rel: (..., 3) relative fractional coordinates (tensor or array).
        K (int): Even number of channels.

    Returns:
        torch.Tensor: (..., 3, K)
    """
    if K % 2:
        raise DomainError(f"Fourier channel count must be even, got {K}")
    f = torch.as_tensor(f_rel, dtype=torch.float64)
    freqs = 2.0 * math.pi * torch.arange(K // 2, dtype=torch.float64)
    angles = f[..., None] * freqs
    return torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).flatten(-2)


def time_embedding(t: int, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / (half - 1))
    angles = float(t) * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)])


def _mlp(n_in: int, n_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(n_in, n_out), nn.SiLU(), nn.Linear(n_out, n_out), nn.SiLU())


class ScoreNetwork(nn.Module):
    def __init__(self, config: DenoiserConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        d, K = config.hidden, config.fourier
        self.atom_embedding = nn.Linear(config.n_types, d)
        self.input_fusion = nn.Sequential(nn.Linear(d + config.time_dim, d), nn.SiLU())
        self.message_nets = nn.ModuleList([_mlp(2 * d + 6 + 3 * K, d) for _ in range(config.layers)])
        self.update_nets = nn.ModuleList([_mlp(2 * d, d) for _ in range(config.layers)])
        self.lattice_head = nn.Linear(d, 6)
        self.coord_head = nn.Linear(d, 3)
        self.type_head = nn.Linear(d, config.n_types)
        self.to(torch.float64)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        """Uniform in +-1/sqrt(fan_in) from a generator seeded with `seed`."""
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    bound = 1.0 / math.sqrt(module.in_features)
                    module.weight.uniform_(-bound, bound, generator=generator)
                    module.bias.uniform_(-bound, bound, generator=generator)

    def forward(
        self, k: torch.Tensor, frac_coords: torch.Tensor, types: torch.Tensor, t: int
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """
        Raw network outputs before constraints.

        Args:
            k: (6,) lattice vector.
            frac_coords: (N, 3) atom positions.
            types: (N, h) atom types.
            t (int): Diffusion step.

        Returns:
            (eps_k (6,), eps_F (N, 3), eps_A (N, h))
        """
        n = frac_coords.shape[0]
        if k.shape != (6,) or frac_coords.shape != (n, 3) or types.shape != (n, self.config.n_types):
            raise DomainError(
                f"denoiser input shapes k{tuple(k.shape)}, F{tuple(frac_coords.shape)}, "
                f"A{tuple(types.shape)} do not fit n_types={self.config.n_types}"
            )
        temb = time_embedding(t, self.config.time_dim).expand(n, -1)
        h = self.input_fusion(torch.cat([self.atom_embedding(types), temb], dim=-1))

        rel = frac_coords[None, :, :] - frac_coords[:, None, :]
        rel = rel - torch.round(rel)
        psi = fourier_embed(rel, self.config.fourier).reshape(n, n, -1)
        edge_k = k.expand(n, n, 6)
        d = h.shape[-1]
        for message_net, update_net in zip(self.message_nets, self.update_nets):
            pair = torch.cat([h[:, None, :].expand(n, n, d), h[None, :, :].expand(n, n, d), edge_k, psi], dim=-1)
            messages = message_net(pair).sum(dim=1)
            h = h + update_net(torch.cat([h, messages], dim=-1))

        return self.lattice_head(h.mean(dim=0)), self.coord_head(h), self.type_head(h)

    def denoise(self, state: DiffusionState, layout: SiteLayout) -> DenoiserOutput:
        if state.basic_types is None:
            raise DomainError("the score network needs basic types (one-hot or noised)")
        if np.shape(state.basic_coords) != (layout.n_sites, 3):
            raise DomainError(f"basic coordinates must have shape ({layout.n_sites}, 3)")
        site_index = torch.as_tensor(layout.site_index)
        with torch.set_grad_enabled(self.training and torch.is_grad_enabled()):
            k = torch.as_tensor(np.asarray(state.k, dtype=float))
            coords = torch.as_tensor(layout.expand(state.basic_coords))
            types = torch.as_tensor(np.asarray(state.basic_types, dtype=float))[site_index]
            eps_k, eps_F, eps_A = self(k, coords, types, state.t)

            eps_k = eps_k * torch.as_tensor(layout.mask.m)
            pullback = torch.as_tensor(
                np.einsum("nij,njk->nik", layout.subspaces[layout.site_index], layout.pullbacks)
            )
            atom_eps_F = torch.einsum("nij,nj->ni", pullback, eps_F)
            counts = torch.as_tensor(layout.multiplicities, dtype=torch.float64)[:, None]
            eps_Fprime = torch.zeros(layout.n_sites, 3, dtype=torch.float64).index_add(0, site_index, atom_eps_F)
            eps_Aprime = torch.zeros(layout.n_sites, eps_A.shape[1], dtype=torch.float64).index_add(
                0, site_index, eps_A
            )
        return DenoiserOutput(eps_k, eps_Fprime / counts, eps_Aprime / counts, atom_eps_F)


def backward(network: nn.Module, loss_fn: Callable[[], torch.Tensor]) -> Dict[str, np.ndarray]:
    """Reverse-mode gradients of `loss_fn()` for every named parameter."""
    network.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    return {
        name: (np.zeros(p.shape) if p.grad is None else p.grad.detach().numpy().copy())
        for name, p in network.named_parameters()
    }


def state_to_document(network: ScoreNetwork, vocabulary: TypeVocabulary) -> Dict[str, Any]:
    tensors = {
        name: {"shape": list(value.shape), "data": value.detach().reshape(-1).tolist()}
        for name, value in network.state_dict().items()
    }
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": network.seed,
        "config": network.config.to_dict(),
        "vocabulary": list(vocabulary.symbols),
        "tensors": tensors,
    }


def state_from_document(doc: Dict[str, Any], source: str = "<document>") -> Tuple[ScoreNetwork, TypeVocabulary]:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DocumentError(f"{source}: not an sgdiff checkpoint (format={doc.get('format')!r})")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise DocumentError(f"{source}: unsupported checkpoint version {doc.get('version')!r}")
    try:
        config = DenoiserConfig.from_dict(doc["config"])
        vocabulary = TypeVocabulary(tuple(doc["vocabulary"]))
        network = ScoreNetwork(config, seed=int(doc["seed"]))
        state = {}
        for name, entry in doc["tensors"].items():
            state[name] = torch.tensor(entry["data"], dtype=torch.float64).reshape(entry["shape"])
        network.load_state_dict(state, strict=True)
    except (KeyError, TypeError, RuntimeError) as exc:
        raise DocumentError(f"{source}: malformed checkpoint: {exc}") from None
    if vocabulary.size != config.n_types:
        raise DocumentError(f"{source}: vocabulary of {vocabulary.size} types for n_types={config.n_types}")
    network.eval()
    return network, vocabulary


def save_checkpoint(path: Union[str, Path], network: ScoreNetwork, vocabulary: TypeVocabulary) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(gzip_bytes(canonical_json(state_to_document(network, vocabulary))))
    logger.info("Wrote checkpoint %s", path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[ScoreNetwork, TypeVocabulary]:
    path = Path(path)
    if not path.exists():
        raise DocumentError(f"checkpoint not found: {path}")
    try:
        with gzip.open(path, "rt", encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DocumentError(f"{path}: cannot read checkpoint: {exc}") from None
    return state_from_document(doc, str(path))
