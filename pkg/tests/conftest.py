import json
from pathlib import Path

import numpy as np
import pytest

from sgdiff.core.diffusion import ensure_score_weight
from sgdiff.core.schedule import NoiseSchedule
from sgdiff.core.spacegroup import expand_structure

TOY_DIR = Path(__file__).resolve().parents[1] / "sgdiff" / "data" / "toy"


def rock_salt(a: float = 5.64, cation: str = "Na", anion: str = "Cl"):
    """Conventional 8-atom rock-salt cell in Fm-3m (4a + 4b)."""
    return expand_structure([cation, anion], np.zeros((2, 3)), ["a", "b"], a * np.eye(3), 225)


def pnma_4c(x: float = 0.11, z: float = 0.37):
    """Group 62 with one 4c site (x, 1/4, z) and one 4a site; orthorhombic cell."""
    return expand_structure(
        ["Ca", "O"],
        np.array([[x, 0.0, z], [0.0, 0.0, 0.0]]),
        ["c", "a"],
        np.diag([5.4, 7.6, 5.3]),
        62,
    )


def wurtzite(z: float = 0.382):
    a, c = 3.25, 5.21
    lattice = np.array([[a, -a / 2, 0.0], [0.0, a * np.sqrt(3) / 2, 0.0], [0.0, 0.0, c]])
    return expand_structure(["Zn", "O"], np.array([[0.0, 0.0, 0.0], [0.0, 0.0, z]]), ["b", "b"], lattice, 186)


@pytest.fixture
def nacl():
    """Annotated rock-salt NaCl."""
    return rock_salt()


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture(scope="session")
def schedule():
    """T = 200 schedule with its score weight attached."""
    return ensure_score_weight(NoiseSchedule(T=200), samples=2000, seed=0)


@pytest.fixture
def small_config(tmp_path):
    """Config file with a short schedule for CLI runs."""
    path = tmp_path / "config.json"
    path.write_text(
        json.dumps(
            {
                "schedule": {"T": 50, "lambda_samples": 1000},
                "sampling": {"t_start": 20, "progress": False},
                "train": {"epochs": 2, "optimizer": "adam", "batch_size": 5},
            }
        ),
        encoding="utf-8",
    )
    return path
