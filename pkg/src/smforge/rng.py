"""Counter-based random streams keyed by (seed, entity kind, entity ids).

Every stochastic entity (a nanocrystal, an emitter, a camera frame, a scan
repetition) gets its own Philox stream whose key is a hash of its identity.
Results therefore never depend on the order or thread in which entities are
generated.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

_MASK64 = (1 << 64) - 1


def _encode(part) -> bytes:
    if isinstance(part, (bool, np.bool_)):
        raise TypeError("bool is not a valid stream key part")
    if isinstance(part, (int, np.integer)):
        raw = str(int(part)).encode("ascii")
        return b"i" + struct.pack("<I", len(raw)) + raw
    if isinstance(part, str):
        raw = part.encode("utf-8")
        return b"s" + struct.pack("<I", len(raw)) + raw
    raise TypeError(f"unsupported stream key part: {part!r}")


class Stream:
    """A named, hierarchical random stream.

    >>> s = Stream(42)
    >>> a = s.child("emitter", 7).generator().normal()
    >>> b = Stream(42).child("emitter", 7).generator().normal()
    >>> a == b
    True
    """

    __slots__ = ("seed", "path")

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed) & _MASK64
        self.path = tuple(path)

    def child(self, *parts) -> Stream:
        return Stream(self.seed, self.path + parts)

    def key(self) -> int:
        h = hashlib.blake2b(digest_size=16, person=b"smforge-stream")
        h.update(struct.pack("<Q", self.seed))
        for p in self.path:
            h.update(_encode(p))
        return int.from_bytes(h.digest(), "little")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key()))

    def __repr__(self):
        return f"Stream(seed={self.seed}, path={self.path!r})"

    def __eq__(self, other):
        return isinstance(other, Stream) and (self.seed, self.path) == (other.seed, other.path)

    def __hash__(self):
        return hash((self.seed, self.path))


def as_stream(rng, *default_path) -> Stream:
    """Accept a Stream or an integer seed."""
    if isinstance(rng, Stream):
        return rng
    if isinstance(rng, (int, np.integer)):
        return Stream(int(rng), default_path)
    raise TypeError(f"expected Stream or int seed, got {type(rng).__name__}")
