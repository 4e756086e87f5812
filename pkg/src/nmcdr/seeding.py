"""Named random streams split from one root seed.

Every consumer asks for its own stream (``"split"``, ``"negatives"``, ...), so
switching an ablation flag never shifts the randomness another stage sees.
"""
import zlib

import numpy as np

STREAMS = ("ingest", "overlap", "density", "split", "negatives", "eval", "val", "init", "matching",
           "shuffle", "synth", "stability")


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for ``(seed, name, *extra)``; identical inputs give identical draws."""
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    key.extend(int(e) & 0xFFFFFFFF for e in extra)
    return np.random.default_rng(np.random.SeedSequence(key))
