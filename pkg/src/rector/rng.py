"""Seed splitting.

Every random stream is derived from one integer seed plus a tuple of labels,
so independent parts of the pipeline (website profiles, per-visit noise,
negative sampling, ...) never share state and can be regenerated in any
order. Streams use numpy's counter-based Philox bit generator.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def _label_word(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & MASK64
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive(seed: int, *labels) -> np.random.Generator:
    """Return an independent generator for ``(seed, *labels)``."""
    ss = np.random.SeedSequence(
        entropy=int(seed) & MASK64,
        spawn_key=tuple(_label_word(lab) for lab in labels),
    )
    return np.random.Generator(np.random.Philox(ss))


def derive_int(seed: int, *labels) -> int:
    """A 63-bit integer seed for ``(seed, *labels)``."""
    return int(derive(seed, *labels).integers(0, 2**63 - 1))
