"""Named random streams derived from one global seed.

A stream name such as ``"curriculum.run_step.2"`` always maps to the same
child seed, so adding a new stream never shifts the numbers drawn by an
existing one.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

_MASK63 = (1 << 63) - 1


def derive_seed(seed: int, stream: str) -> int:
    digest = hashlib.blake2b(f"{int(seed)}/{stream}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & _MASK63


def numpy_rng(seed: int, stream: str | None = None) -> np.random.Generator:
    if stream is not None:
        seed = derive_seed(seed, stream)
    return np.random.default_rng(seed)


def torch_generator(seed: int, stream: str | None = None) -> torch.Generator:
    if stream is not None:
        seed = derive_seed(seed, stream)
    gen = torch.Generator()
    gen.manual_seed(int(seed) & _MASK63)
    return gen
