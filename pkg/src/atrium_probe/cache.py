"""Checkpoint cache lookup.

Pretrained weights (the ResNet50 encoder, published backbone archives) are
never downloaded by this package; they are picked up from a local cache
directory, `ATRIUM_PROBE_CACHE` if set, else ~/.cache/atrium_probe.
"""

import os
from pathlib import Path

CACHE_ENV_VAR = "ATRIUM_PROBE_CACHE"


def checkpoint_cache_dir() -> Path:
    override = os.environ.get(CACHE_ENV_VAR)
    if override:
        return Path(override)
    return Path.home() / ".cache" / "atrium_probe"


def cached_checkpoint(filename: str) -> Path:
    """Path of a cache entry; raises if the file is not present."""
    path = checkpoint_cache_dir() / filename
    if not path.exists():
        raise FileNotFoundError(
            f"checkpoint {filename!r} not found in {checkpoint_cache_dir()} "
            f"(set {CACHE_ENV_VAR} to point at your checkpoint cache)"
        )
    return path
