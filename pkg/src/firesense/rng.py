"""Deterministic random-stream derivation.

Every source of randomness in the toolkit is a PCG64 generator derived from
an explicit (seed, *key) tuple, so independent concerns (init, data order,
dropout, soft labels, flips, MC passes) get independent, replayable streams.
String keys are hashed with sha256 rather than Python's ``hash`` so stream
derivation does not depend on PYTHONHASHSEED.
"""

import hashlib

import numpy as np


def _key_to_int(part) -> int:
    if isinstance(part, str):
        return int.from_bytes(hashlib.sha256(part.encode()).digest()[:8], "little")
    return int(part)


def rng_for(seed: int, *key) -> np.random.Generator:
    """Return a fresh generator for the stream identified by (seed, *key)."""
    entropy = [int(seed)] + [_key_to_int(p) for p in key]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def get_state(rng: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a generator's state."""
    return rng.bit_generator.state


def set_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state
