"""Named, splittable random streams.

Every stochastic consumer in the pipeline derives its own generator from
(seed, label...) so that adding or reordering consumers never perturbs the
others. Streams are counter-based (Philox) and fully reproducible.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, *labels) -> np.random.Generator:
    """Independent generator for (seed, labels). Same inputs, same stream."""
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode())
    key = int.from_bytes(h.digest()[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))
