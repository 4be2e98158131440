"""Named, counter-based random streams.

Every stochastic draw in the package flows through a stream derived from a
single root seed and a string name, so runs are bit-reproducible and
individual sources of randomness (weight init, latent init, step noise,
data shuffling, restarts) can be replayed or advanced independently.
Streams are backed by Philox, whose state is a plain counter/key pair and
therefore serializes cleanly into checkpoint headers.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _derive_key(root_seed: int, name: str) -> np.ndarray:
    digest = hashlib.sha256(f"{root_seed}:{name}".encode()).digest()
    return np.frombuffer(digest[:16], dtype=np.uint64).copy()


class RngStream:
    """One named Philox stream. ``stream_id`` is unique per (seed, name)."""

    def __init__(self, root_seed: int, name: str):
        self.name = name
        self.root_seed = root_seed
        key = _derive_key(root_seed, name)
        self.stream_id = key.tobytes().hex()
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        out = self._gen.standard_normal(shape, dtype=np.float32)
        if scale != 1.0:
            out *= np.float32(scale)
        return out

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def shuffle(self, x) -> None:
        self._gen.shuffle(x)

    def uniform(self, shape=None):
        return self._gen.random(size=shape, dtype=np.float32)

    def state(self) -> dict:
        """JSON-safe snapshot of the generator state."""
        return _jsonify(self._gen.bit_generator.state)

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


class StreamSet:
    """Lazily created registry of named streams under one root seed."""

    def __init__(self, root_seed: int):
        self.root_seed = root_seed
        self._streams: dict[str, RngStream] = {}

    def get(self, name: str) -> RngStream:
        if name not in self._streams:
            self._streams[name] = RngStream(self.root_seed, name)
        return self._streams[name]

    def states(self) -> dict:
        return {name: s.state() for name, s in self._streams.items()}

    def restore(self, states: dict) -> None:
        for name, state in states.items():
            self.get(name).set_state(state)


def _jsonify(obj):
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [int(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj
