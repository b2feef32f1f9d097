"""Named counter-based random streams.

Every random quantity in the toolkit is drawn from a stream addressed by
(seed, *path), where path is a tuple of strings/ints naming the consumer,
e.g. ("noise", t) or ("trial", k, "data"). Streams with distinct addresses
are statistically independent Philox instances, so work can be scheduled
across threads in any order without changing a single drawn number.
"""

from __future__ import annotations

import hashlib

import numpy as np

PathPart = str | int


def _key_words(seed: int, path: tuple[PathPart, ...]) -> np.ndarray:
    tag = str(int(seed)) + "/" + "/".join(str(p) for p in path)
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    # Philox-4x64 takes a 2-word key; fixed little-endian decode keeps the
    # mapping identical across platforms.
    return np.array(
        [int.from_bytes(digest[0:8], "little"), int.from_bytes(digest[8:16], "little")],
        dtype=np.uint64,
    )


def stream(seed: int, *path: PathPart) -> np.random.Generator:
    """Generator for the stream addressed by (seed, *path)."""
    return np.random.Generator(np.random.Philox(key=_key_words(seed, tuple(path))))


def subseed(seed: int, *path: PathPart) -> int:
    """Derive a child seed so nested components can build their own streams."""
    digest = hashlib.sha256(
        (str(int(seed)) + "//" + "/".join(str(p) for p in path)).encode("utf-8")
    ).digest()
    return int.from_bytes(digest[16:24], "little") >> 1
