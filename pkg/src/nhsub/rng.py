"""Counter-based random streams: one Philox substream per path (and window)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RngStream:
    master_seed: int
    stream_index: int = 0
    window: int = 0

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(int(self.master_seed) & (2 ** 64 - 1),
                                     spawn_key=(int(self.stream_index), int(self.window)))
        return np.random.Generator(np.random.Philox(seq))

    def child(self, index: int) -> "RngStream":
        """Substream ``index`` (typically a path number) of this stream."""
        return RngStream(self.master_seed, (self.stream_index << 32) + int(index))

    def at_window(self, window: int) -> "RngStream":
        return RngStream(self.master_seed, self.stream_index, int(window))


def as_stream(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    return RngStream(int(rng))
