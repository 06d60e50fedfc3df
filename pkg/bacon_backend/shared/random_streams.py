import zlib

import numpy as np


def _tag(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, stage: str, chain: int = 0, purpose: str = "main") -> np.random.Generator:
    """Named, reproducible random stream derived from the single run seed.

    Streams for different (stage, chain, purpose) triples are statistically
    independent and do not depend on the order in which they are created.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, _tag(stage), int(chain), _tag(purpose)]
    return np.random.default_rng(np.random.SeedSequence(entropy))
