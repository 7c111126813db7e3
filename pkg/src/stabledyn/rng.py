"""Deterministic random streams.

Every source of randomness in the library draws from a counter-based
Philox generator keyed by ``(seed, stream, index)``.  Separate named
streams keep dataset sampling, weight initialization and epoch shuffling
independent of one another, so e.g. changing the dataset size never
perturbs the weight init.
"""

from __future__ import annotations

import numpy as np

# Fixed stream ids; never renumber (would silently change all outputs).
STREAMS = {
    "data": 0,
    "init": 1,
    "shuffle": 2,
    "probe": 3,
    "sim": 4,
    "sweep": 5,
    "split": 6,
}


def stream_rng(seed: int, stream: str | int, index: int = 0) -> np.random.Generator:
    """Return a Generator for the given (seed, stream, index) triple."""
    if isinstance(stream, str):
        try:
            sid = STREAMS[stream]
        except KeyError:
            raise ValueError(f"unknown rng stream {stream!r}") from None
    else:
        sid = int(stream)
    if seed < 0 or index < 0 or sid < 0:
        raise ValueError("seed, stream id and index must be nonnegative")
    key = np.array([np.uint64(seed), np.uint64((sid << 32) + index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def uniform_in_ball(rng: np.random.Generator, center: np.ndarray, radius: float,
                    n: int) -> np.ndarray:
    """Sample ``n`` points uniformly from the Euclidean ball around ``center``."""
    center = np.asarray(center, dtype=np.float64)
    dim = center.shape[0]
    dirs = rng.standard_normal((n, dim))
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    radii = radius * rng.random(n) ** (1.0 / dim)
    return center + dirs / norms * radii[:, None]
