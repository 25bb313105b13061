"""Deterministic named RNG substreams.

All randomness in a run flows from a single master seed. Each stage
(gallery, init, queue, per-step sampling, ...) draws from its own
substream so stages are replayable in isolation and resume is exact.
"""

from __future__ import annotations

import numpy as np


def substream(seed: int, *tags) -> np.random.Generator:
    """Create a Generator for (seed, *tags).

    Tags may be strings or integers. String tags are folded in via their
    UTF-8 bytes, not Python's hash(), so streams are stable across
    processes and platforms.
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    entropy = [int(seed)]
    for tag in tags:
        if isinstance(tag, str):
            entropy.append(int.from_bytes(tag.encode("utf-8"), "little"))
        else:
            entropy.append(int(tag))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
