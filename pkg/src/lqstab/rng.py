"""Seeded, splittable random streams.

Every random draw in the toolkit comes from a Philox (counter-based) generator
keyed by ``SeedSequence(seed, spawn_key=keys)``. Independent streams for
Monte Carlo replicates, feedback redraws and noise episodes are obtained by
extending the key tuple, so results do not depend on execution order or on the
number of worker processes.
"""
import numpy as np


def make_rng(seed, *keys):
    """Generator for the stream identified by ``(seed, *keys)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed, *keys):
    """63-bit integer seed for the child stream ``(seed, *keys)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    hi, lo = (int(v) for v in ss.generate_state(2, np.uint32))
    return ((hi << 32) | lo) & ((1 << 63) - 1)
