"""Seed derivation: every random stream in a run descends from one global seed"""

from typing import Union

import numpy as np
import torch

SeedKey = Union[int, str]


def _as_entropy(key: SeedKey) -> int:
    if isinstance(key, int):
        if key < 0:
            raise ValueError(f"seed keys must be non-negative, got {key}")
        return key
    # Stable across processes, unlike hash()
    return int.from_bytes(str(key).encode("utf-8"), "little") % (2**63)


def derive_seed(*keys: SeedKey) -> int:
    """
    Derive a 63-bit seed from a tuple of keys.

    derive_seed(global_seed, member_index) depends only on its own keys, so
    adding members never changes the seeds of existing ones.
    """
    sequence = np.random.SeedSequence([_as_entropy(k) for k in keys])
    return int(sequence.generate_state(1, dtype=np.uint64)[0]) % (2**63)


def numpy_rng(*keys: SeedKey) -> np.random.Generator:
    """numpy Generator on the derived stream"""
    return np.random.default_rng(derive_seed(*keys))


def torch_generator(*keys: SeedKey) -> torch.Generator:
    """CPU torch Generator on the derived stream"""
    generator = torch.Generator(device="cpu")
    generator.manual_seed(derive_seed(*keys))
    return generator
