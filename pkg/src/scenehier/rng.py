"""Named RNG derivation.

Every random draw in the package flows from one experiment seed through
``derive_rng(seed, component, *ids)``. Derivation hashes the names, so the
stream for one component is independent of whether another component runs
at all (inserting or dropping a pipeline step never perturbs the others).
"""

from __future__ import annotations

import hashlib
import json

import numpy as np


def derive_seed(seed: int, *names: object) -> int:
    """Stable 64-bit child seed for (seed, *names). Platform independent."""
    payload = json.dumps([int(seed), *[str(n) for n in names]]).encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, *names: object) -> np.random.Generator:
    """Generator for the named stream (seed, *names)."""
    return np.random.default_rng(derive_seed(seed, *names))
