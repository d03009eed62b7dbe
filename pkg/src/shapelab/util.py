"""Small shared helpers."""

from __future__ import annotations

import hashlib

import numpy as np


def rng_from(*parts):
    """Deterministic Generator keyed by an arbitrary tuple of hashables.

    Strings and mixed tuples are hashed to a stable 64-bit seed, so data,
    dropout, and init streams can be derived from readable keys without
    colliding.
    """
    digest = hashlib.sha256(repr(parts).encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def rle_encode(mask):
    """Flat run-length encoding of a binary mask: [h, w, run0, run1, ...].

    Runs alternate starting with the count of leading zeros (possibly 0),
    scanning row-major.
    """
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    flat = mask.reshape(-1)
    runs = []
    current, count = False, 0
    for v in flat:
        if v == current:
            count += 1
        else:
            runs.append(count)
            current, count = v, 1
    runs.append(count)
    return [int(h), int(w)] + [int(r) for r in runs]


def rle_decode(rle):
    """Inverse of ``rle_encode``."""
    h, w = rle[0], rle[1]
    out = np.zeros(h * w, dtype=bool)
    pos, value = 0, False
    for run in rle[2:]:
        if value:
            out[pos:pos + run] = True
        pos += run
        value = not value
    if pos != h * w:
        raise ValueError("run lengths do not cover the mask")
    return out.reshape(h, w)
