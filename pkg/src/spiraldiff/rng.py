"""Deterministic named random streams derived from one experiment seed.

Every stochastic component (corpus synthesis, parameter init, diffusion
noise, sampling) pulls its own stream by name, so adding draws to one
component never shifts another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def named_rng(seed: int, name: str) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(stream_key(name),))
    return np.random.default_rng(ss)
