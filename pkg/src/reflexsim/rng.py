"""Labeled, counter-based random streams.

Every random quantity in a run is drawn from a stream derived from the
single scenario seed plus a string label, so adding a component never
shifts the draws of unrelated components.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np


def derive_seed(root_seed: int, *labels: str) -> int:
    """Derive a 64-bit sub-seed from the root seed and a label path."""
    h = hashlib.sha256()
    h.update(str(int(root_seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(label.encode())
    return int.from_bytes(h.digest()[:8], "big")


def make_rng(root_seed: int, *labels: str) -> np.random.Generator:
    """Counter-based (Philox) generator for the given labeled stream."""
    return np.random.Generator(np.random.Philox(key=derive_seed(root_seed, *labels)))


def uniform_int(rng: np.random.Generator, lo: int, hi: int) -> int:
    """Uniform integer in [lo, hi], both ends inclusive."""
    if hi < lo:
        raise ValueError(f"empty range [{lo}, {hi}]")
    return int(rng.integers(lo, hi + 1))


def exponential_ns(rng: np.random.Generator, mean_ns: int) -> int:
    """Exponential service time in whole ns via inverse-CDF sampling."""
    if mean_ns <= 0:
        return 0
    u = float(rng.random())
    return int(round(-mean_ns * math.log1p(-u)))
