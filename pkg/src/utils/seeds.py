"""
Seed Utilities
One root seed per run, split deterministically per consumer
"""
import zlib

import numpy as np


def derive_seed(root: int, consumer: str) -> int:
    """Derive a 32-bit seed for a named consumer ('init', 'shuffle', 'attack', ...)"""
    seq = np.random.SeedSequence(root, spawn_key=(zlib.crc32(consumer.encode()),))
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def make_rng(root: int, consumer: str) -> np.random.Generator:
    """Independent generator for a named consumer"""
    return np.random.default_rng(derive_seed(root, consumer))


def derived_seeds(root: int, consumers) -> dict:
    """Seeds for a list of consumers, for run metadata"""
    return {name: derive_seed(root, name) for name in consumers}
