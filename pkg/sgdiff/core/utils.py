"""
Module: sgdiff.core.utils

Shared helpers for sgdiff's core modules:

1) Error types
   - `DomainError` is the one error family raised by library code; the CLI maps it to exit code 1.
   - Subclasses name the concern: space-group tables, crystal documents, config, run store.

2) `find_workspace_root()`
   - Walks up from the working directory looking for a `.sgdiff/` directory,
     the same way `git` looks for `.git/`.

3) `wrap_frac()`
   - Fractional wrap w(x) = x - floor(x), exact onto [0, 1).

4) `configure_logging()`
   - Stderr handler setup, called once by the CLI.

Key Functions:
- `find_workspace_root(start: Path | None = None) -> Path | None`
- `wrap_frac(x)`
- `configure_logging(verbosity: int)`
"""

import logging
from pathlib import Path
from typing import Optional

import numpy as np

WORKSPACE_DIRNAME = ".sgdiff"


class DomainError(ValueError):
    """Input violates a documented precondition of an sgdiff operation."""


class SpaceGroupDataError(DomainError):
    """Malformed or inconsistent space-group table."""


class DocumentError(DomainError):
    """Malformed crystal or lattice document."""


class ConfigError(DomainError):
    """Invalid configuration key or value."""


class StoreError(DomainError):
    """Missing manifest or blob in the run store."""


def wrap_frac(x):
    """
    Map fractional coordinates onto [0, 1).

    x - floor(x) can round up to exactly 1.0 for tiny negative inputs, so those
    entries are folded back to 0.0.
    """
    arr = np.asarray(x, dtype=float)
    wrapped = arr - np.floor(arr)
    return np.where(wrapped >= 1.0, 0.0, wrapped)


def wrapped_delta(a, b):
    """Shortest periodic difference a - b, componentwise in [-0.5, 0.5)."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return d - np.floor(d + 0.5)


def find_workspace_root(start: Optional[Path] = None) -> Optional[Path]:
    """
    Look upward from `start` (default: current directory) for a `.sgdiff/` workspace.

    Returns:
        Path | None: The directory containing `.sgdiff/`, or None if there is none.
    """
    search_dir = (start or Path.cwd()).resolve()
    for candidate in (search_dir, *search_dir.parents):
        if (candidate / WORKSPACE_DIRNAME).is_dir():
            return candidate
    return None


def configure_logging(verbosity: int = 0) -> None:
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG

    root = logging.getLogger("sgdiff")
    root.setLevel(level)
    if not any(getattr(h, "_sgdiff_cli", False) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        handler._sgdiff_cli = True
        root.addHandler(handler)
