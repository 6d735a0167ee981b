"""Named random substreams derived from one global seed.

Every stochastic component (data synthesis, augmentation, weight init,
subsampling, ...) asks for its own stream keyed by a tuple of names and
integers, so any component can be reproduced without replaying the others.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch


def _key_words(keys) -> list[int]:
    words = []
    for k in keys:
        if isinstance(k, str):
            words.append(zlib.crc32(k.encode("utf-8")))
        else:
            words.append(int(k) & 0xFFFFFFFF)
    return words


def rng_for(seed: int, *keys) -> np.random.Generator:
    """Return an independent numpy Generator for ``(seed, *keys)``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *_key_words(keys)])
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *keys) -> int:
    """A 63-bit integer seed for libraries that want a plain int (torch)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *_key_words(keys)])
    hi, lo = (int(w) for w in ss.generate_state(2, dtype=np.uint32))
    return (hi << 31) ^ lo


def seed_torch(seed: int, *keys) -> None:
    torch.manual_seed(derive_seed(seed, *keys))
