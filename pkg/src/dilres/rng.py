"""Named random sub-streams derived from one seed.

Each consumer (``init``, ``shuffle``, ``rise``, ``lime``, ``synth``) draws from
its own generator, so adding a consumer never shifts another's sequence.
"""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, key])))
