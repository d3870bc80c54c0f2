"""Deterministic random-stream derivation.

Every random stream in the package is derived from a root seed through
``numpy.random.SeedSequence`` with an explicit ``spawn_key``.  The key is a
path of labels, so the stream for a given task is a pure function of
``(root, path)`` and is reproducible across platforms and process layouts.

Derivation tree used by the run orchestration (documented contract):

    (root, "data")                  synthetic data generation
    (root, "reference")             reference posterior run
    (root, "tune", kind, level)     pilot step-size tuning per proposal kind
    (root, "chain", level)          measured chain at a level
    (root, "rep", method, i, j)     rate-study replicate j at grid index i
                                    (collapsed to a fresh 64-bit root that
                                    seeds that replicate's own subtree)
    (root, "predict")               predictive simulation draws

String labels are mapped to 32-bit integers by a fixed hash so the key stays
platform independent.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_word(label: int | str) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("seed path labels must be non-negative")
        return int(label)
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def seed_sequence(root: int, *path: int | str) -> np.random.SeedSequence:
    """SeedSequence for the stream addressed by ``path`` under ``root``."""
    key = tuple(_label_word(p) for p in path)
    return np.random.SeedSequence(entropy=int(root), spawn_key=key)


def derive_rng(root: int, *path: int | str) -> np.random.Generator:
    """Fresh generator for the stream addressed by ``path`` under ``root``."""
    return np.random.default_rng(seed_sequence(root, *path))
