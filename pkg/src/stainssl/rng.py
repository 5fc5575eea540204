"""Counter-based random streams.

Every random draw in the pipeline comes from a Philox generator keyed by
(root seed, *path) where the path encodes what the draw is for, e.g.
(epoch, iteration, sample index, channel, op).  Streams are independent,
reproducible regardless of worker count, and random-access: any point in
training can be replayed from its counters alone, which is what makes
checkpoint resume exact.
"""

from __future__ import annotations

import numpy as np

# Stream namespaces (first path element after the root seed).
STREAM_AUGMENT = 1
STREAM_SAMPLER = 2
STREAM_MIXUP = 3
STREAM_SUBSAMPLE = 4
STREAM_INIT = 5
STREAM_DATAGEN = 6

# Channel keys used below STREAM_AUGMENT.
CHANNEL_RGB = 0
CHANNEL_H = 1
CHANNEL_E = 2


def substream(seed: int, *path: int) -> np.random.Generator:
    """Return the generator for one node of the stream hierarchy.

    Identical (seed, path) always yields an identical stream; distinct
    paths yield statistically independent streams.
    """
    if any(p < 0 for p in path):
        raise ValueError(f"stream path must be non-negative, got {path}")
    ss = np.random.SeedSequence(seed, spawn_key=tuple(path))
    return np.random.Generator(np.random.Philox(ss))
