"""
Module: sgdiff.core.initializer

This module provides the `sgdiff init` functionality and the run configuration:

1) `init_workspace(root)` creates `.sgdiff/` with
   - `objects/`    – content-addressed gzip JSON blobs (checkpoints, traces, sample sets).
   - `manifests/`  – per-run manifests mapping artifact names -> blob digests.
   - `cache/`      – score-weight tables keyed by schedule parameters.
   - a default `config.json` (schedule, model, loss, train, sampling, run, match,
     storage and housekeeping sections).

2) `load_run_config(path)` resolves the config: an explicit file, else the nearest
   `.sgdiff/config.json` above the working directory, else the defaults. Files are
   deep-merged over the defaults and validated by `RunConfig.from_dict`.

Exports:
- `DEFAULT_CONFIG`, `RunConfig`, `init_workspace`, `load_run_config`
"""

import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from sgdiff import __version__
from sgdiff.core.denoiser import DenoiserConfig
from sgdiff.core.diffusion import F_LOSS_MODES, LossWeights
from sgdiff.core.evaluation import MatchSettings
from sgdiff.core.schedule import NoiseSchedule, build_schedule
from sgdiff.core.trainer import OPTIMIZERS, TrainSettings
from sgdiff.core.utils import WORKSPACE_DIRNAME, ConfigError, DomainError, find_workspace_root

logger = logging.getLogger(__name__)

MODES = ("csp", "ab-initio", "refine")

DEFAULT_CONFIG: Dict[str, Any] = {
    "sgdiff_version": __version__,
    "schedule": {
        "T": 1000,
        "s": 0.008,
        "sigma_1": 0.005,
        "sigma_T": 0.5,
        "gamma": 5e-6,
        "n_img": 3,
        "lambda_samples": 10000,
        "lambda_seed": 0,
    },
    "model": {"layers": 3, "hidden": 64, "fourier": 32, "time_dim": 64},
    "loss": {"lambda_k": 1.0, "lambda_F": 1.0, "lambda_A": 20.0, "f_loss": "post"},
    "train": {"epochs": 200, "lr": 1e-3, "momentum": 0.9, "optimizer": "sgd", "batch_size": 4, "log_every": 10},
    "sampling": {"t_start": 100, "jobs": 1, "record_every": 0, "progress": True},
    "run": {"seed": 0, "mode": "csp"},
    "match": {"stol": 0.5, "ltol": 0.3, "angle_tol": 10.0},
    "storage": {
        "strategy": "content-addressable",
        "hash_algo": "sha256",
        "compression": "gzip",
        "objects_dir": f"{WORKSPACE_DIRNAME}/objects",
        "manifests_dir": f"{WORKSPACE_DIRNAME}/manifests",
        "cache_dir": f"{WORKSPACE_DIRNAME}/cache",
    },
    "housekeeping": {"prune_unreferenced": True, "keep_last_manifests": 5},
    "runs": {"latest": None},
}


def init_workspace(root: Path) -> Path:
    """
    Create `.sgdiff/` under `root` with the store directories and a default config.json.
    An existing config is left untouched.

    Returns:
        Path: The `.sgdiff` directory.
    """
    workspace = root / WORKSPACE_DIRNAME
    for sub in ("objects", "manifests", "cache"):
        (workspace / sub).mkdir(parents=True, exist_ok=True)

    config_file = workspace / "config.json"
    if config_file.exists():
        logger.info("Keeping existing %s", config_file)
    else:
        with config_file.open("w", encoding="utf-8") as f:
            json.dump(DEFAULT_CONFIG, f, indent=4)
    return workspace


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _number(section: Dict[str, Any], name: str, key: str, kind=float, positive: bool = True, minimum=None):
    value = section.get(key)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name}.{key} must be a number, got {value!r}")
    if kind is int and float(value) != int(value):
        raise ConfigError(f"{name}.{key} must be an integer, got {value!r}")
    value = kind(value)
    if positive and value <= 0:
        raise ConfigError(f"{name}.{key} must be positive, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{name}.{key} must be >= {minimum}, got {value!r}")
    return value


def _choice(section: Dict[str, Any], name: str, key: str, options: Tuple[str, ...]) -> str:
    value = section.get(key)
    if value not in options:
        raise ConfigError(f"{name}.{key} must be one of {options}, got {value!r}")
    return value


@dataclass(frozen=True)
class RunConfig:
    schedule: NoiseSchedule
    lambda_samples: int
    lambda_seed: int
    model: Dict[str, int]
    weights: LossWeights
    train: TrainSettings
    t_start: int
    jobs: int
    record_every: int
    progress: bool
    seed: int
    mode: str
    match: MatchSettings
    raw: Dict[str, Any]

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        """
        Validate a merged config against every module precondition.

        Raises:
            ConfigError: Names the offending `section.key`.
        """
        merged = _merge(DEFAULT_CONFIG, data)
        sections = {}
        for name in ("schedule", "model", "loss", "train", "sampling", "run", "match"):
            if not isinstance(merged.get(name), dict):
                raise ConfigError(f"{name} must be an object")
            sections[name] = merged[name]
        sc, md, ls, tr, sa, rn, mt = (sections[n] for n in ("schedule", "model", "loss", "train", "sampling", "run", "match"))

        T = _number(sc, "schedule", "T", int, minimum=2)
        sigma_1 = _number(sc, "schedule", "sigma_1")
        sigma_T = _number(sc, "schedule", "sigma_T")
        if sigma_1 >= sigma_T:
            raise ConfigError(f"schedule.sigma_1 must be below schedule.sigma_T, got {sigma_1} >= {sigma_T}")
        schedule_section = {
            "T": T,
            "s": _number(sc, "schedule", "s"),
            "sigma_1": sigma_1,
            "sigma_T": sigma_T,
            "gamma": _number(sc, "schedule", "gamma"),
            "n_img": _number(sc, "schedule", "n_img", int, minimum=1),
        }
        model = {
            "layers": _number(md, "model", "layers", int, minimum=1),
            "hidden": _number(md, "model", "hidden", int, minimum=1),
            "fourier": _number(md, "model", "fourier", int, minimum=2),
            "time_dim": _number(md, "model", "time_dim", int, minimum=4),
        }
        for key in ("fourier", "time_dim"):
            if model[key] % 2:
                raise ConfigError(f"model.{key} must be even, got {model[key]}")

        weights = LossWeights(
            k=_number(ls, "loss", "lambda_k"), F=_number(ls, "loss", "lambda_F"), A=_number(ls, "loss", "lambda_A")
        )
        f_loss = _choice(ls, "loss", "f_loss", F_LOSS_MODES)
        mode = _choice(rn, "run", "mode", MODES)
        seed = _number(rn, "run", "seed", int, positive=False, minimum=0)
        train = TrainSettings(
            epochs=_number(tr, "train", "epochs", int, minimum=1),
            lr=_number(tr, "train", "lr"),
            momentum=_number(tr, "train", "momentum", positive=False, minimum=0),
            optimizer=_choice(tr, "train", "optimizer", OPTIMIZERS),
            batch_size=_number(tr, "train", "batch_size", int, minimum=1),
            log_every=_number(tr, "train", "log_every", int, positive=False, minimum=0),
            f_loss=f_loss,
            weights=weights,
            fixed_types=mode != "ab-initio",
            seed=seed,
        )
        t_start = _number(sa, "sampling", "t_start", int, positive=False, minimum=0)
        if t_start > T:
            raise ConfigError(f"sampling.t_start must be <= schedule.T ({T}), got {t_start}")
        if not isinstance(sa.get("progress"), bool):
            raise ConfigError(f"sampling.progress must be true or false, got {sa.get('progress')!r}")

        try:
            schedule = build_schedule(schedule_section)
            match = MatchSettings(
                stol=_number(mt, "match", "stol"),
                ltol=_number(mt, "match", "ltol"),
                angle_tol=_number(mt, "match", "angle_tol"),
            )
        except ConfigError:
            raise
        except DomainError as exc:
            raise ConfigError(f"schedule: {exc}") from None

        return cls(
            schedule=schedule,
            lambda_samples=_number(sc, "schedule", "lambda_samples", int, minimum=1),
            lambda_seed=_number(sc, "schedule", "lambda_seed", int, positive=False, minimum=0),
            model=model,
            weights=weights,
            train=train,
            t_start=t_start,
            jobs=_number(sa, "sampling", "jobs", int, minimum=1),
            record_every=_number(sa, "sampling", "record_every", int, positive=False, minimum=0),
            progress=sa["progress"],
            seed=seed,
            mode=mode,
            match=match,
            raw=merged,
        )

    def denoiser_config(self, n_types: int) -> DenoiserConfig:
        return DenoiserConfig(n_types=n_types, **self.model)


def load_run_config(path: Optional[Union[str, Path]] = None) -> Tuple[RunConfig, Optional[Path]]:
    """
    Returns:
        (validated config, workspace root or None)
    """
    workspace = find_workspace_root()
    if path is not None:
        config_path = Path(path)
    elif workspace is not None:
        config_path = workspace / WORKSPACE_DIRNAME / "config.json"
    else:
        logger.debug("No workspace found; using built-in defaults")
        return RunConfig.from_dict({}), None

    if not config_path.exists():
        raise ConfigError(f"config file not found: {config_path}")
    try:
        with config_path.open("r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{config_path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{config_path}: expected a JSON object")
    logger.info("Loaded config %s", config_path)
    return RunConfig.from_dict(data), workspace
