import hashlib
import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger("perpetua.rng_service")


def key_of(part: int | str) -> int:
    if isinstance(part, str):
        return int.from_bytes(hashlib.sha1(part.encode("utf-8")).digest()[:8], "little")
    if part < 0:
        raise ValueError(f"Stream keys must be non-negative, got {part}.")
    return int(part)


def substream(seed: int, *keys: int | str) -> np.random.Generator:
    """Philox generator keyed by (seed, *keys).

    The same key always yields the same draws, independent of how many
    workers share the run or in which order streams are created.
    """
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(key_of(k) for k in keys))
    return np.random.Generator(np.random.Philox(sequence))


@dataclass(frozen=True)
class StreamFactory:
    seed: int
    keys: tuple[int | str, ...] = ()

    def child(self, *keys: int | str) -> "StreamFactory":
        return StreamFactory(self.seed, self.keys + tuple(keys))

    def generator(self, *keys: int | str) -> np.random.Generator:
        return substream(self.seed, *(self.keys + tuple(keys)))
