"""Named RNG substreams derived from a single top-level seed.

Every random decision in the package draws from a stream addressed by a
path of names, e.g. ``substream(seed, "synth", subject_id)``. Streams are
independent of each other and of the order in which they are created, so
parallel execution cannot change any output.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def substream(seed: int, *path) -> np.random.Generator:
    """Return a Generator for the (seed, *path) address. Stable across runs."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(p) for p in path)))
