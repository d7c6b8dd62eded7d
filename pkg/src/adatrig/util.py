"""Shared helpers: seeded RNG streams, canonical hashing, rounding."""

from __future__ import annotations

import hashlib
import json
import zlib

import numpy as np


def rng_stream(seed: int, *names: object) -> np.random.Generator:
    """Derive an independent RNG stream from a root seed and a name path.

    Every random draw in the package flows through one of these streams so
    that runs are reproducible and components do not perturb each other's
    randomness (e.g. adding an adversarial head must not change the batch
    order of the task stream).
    """
    words = [int(seed) & 0xFFFFFFFF]
    for name in names:
        words.append(zlib.crc32(str(name).encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(words))


def canonical_json(obj) -> str:
    """Deterministic JSON rendering used for hashing configs and vocabs."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def sha256_of(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def round_half_up(x: float) -> int:
    """Round to nearest integer with ties going up (2.5 -> 3)."""
    return int(np.floor(x + 0.5))


def pct(x: float, digits: int = 1) -> float:
    """Display rounding of a fraction as percentage points."""
    return round(100.0 * x + 1e-12, digits)
