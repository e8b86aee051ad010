"""Named random substreams derived from a single root seed.

Every source of randomness in an experiment (partitioning, weight init,
batch shuffling, probe-image init) pulls from its own named substream, so
perturbing one component never shifts the draws of another.
"""

import zlib

import numpy as np


def _entropy(root_seed: int, name: str, indices: tuple[int, ...]) -> list[int]:
    return [int(root_seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8")), *indices]


def substream(root_seed: int, name: str, *indices: int) -> np.random.Generator:
    """Generator for the substream ``name`` (plus optional integer indices)."""
    return np.random.default_rng(np.random.SeedSequence(_entropy(root_seed, name, indices)))


def derive_seed(root_seed: int, name: str, *indices: int) -> int:
    """Stable integer seed for components that take a seed rather than a Generator."""
    seq = np.random.SeedSequence(_entropy(root_seed, name, indices))
    return int(seq.generate_state(1, dtype=np.uint32)[0])
