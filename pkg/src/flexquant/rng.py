"""Named, independently seeded random streams.

One run seed fans out into fixed streams (weight init, batch shuffling,
swap-mask draws) so that adding draws to one stream never perturbs the
others, and so checkpoints can capture exact generator states.
"""

from __future__ import annotations

import numpy as np

STREAM_NAMES = ("init", "shuffle", "swap")


class RngStreams:
    def __init__(self, seed: int):
        self.seed = int(seed)
        root = np.random.SeedSequence(self.seed)
        children = root.spawn(len(STREAM_NAMES))
        self._streams = {
            name: np.random.Generator(np.random.PCG64(child))
            for name, child in zip(STREAM_NAMES, children)
        }

    def __getitem__(self, name: str) -> np.random.Generator:
        return self._streams[name]

    def state(self) -> dict:
        """JSON-serializable snapshot of all stream states."""
        return {
            "seed": self.seed,
            "streams": {name: gen.bit_generator.state for name, gen in self._streams.items()},
        }

    def set_state(self, state: dict) -> None:
        if set(state["streams"]) != set(STREAM_NAMES):
            raise ValueError(f"stream names {sorted(state['streams'])} != {sorted(STREAM_NAMES)}")
        self.seed = int(state["seed"])
        for name, gen_state in state["streams"].items():
            self._streams[name].bit_generator.state = gen_state
