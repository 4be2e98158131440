"""Checkpoint container: one human-readable JSON header line, then raw
little-endian float32 payloads.

The header lists every tensor's name, shape, byte offset (relative to the
start of the binary section) and length, the model config, the step
counter, and the serialized RNG stream states. EMA shadows live beside raw
parameters under the ``ema/`` name prefix; optimizer moments under
``opt.m/`` and ``opt.v/``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

FORMAT_NAME = "latentloop-checkpoint"


@dataclass
class Checkpoint:
    arrays: dict
    config: dict
    rng_states: dict
    step: int
    extra: dict = field(default_factory=dict)

    def params(self) -> dict:
        return {k: v for k, v in self.arrays.items() if "/" not in k}

    def ema(self) -> dict:
        return {k[len("ema/"):]: v for k, v in self.arrays.items()
                if k.startswith("ema/")}


def save_checkpoint(path, arrays: dict, config: dict, rng_states: dict,
                    step: int, extra: dict | None = None) -> None:
    tensors = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(np.shape(arr)),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": FORMAT_NAME,
        "version": 1,
        "step": int(step),
        "config": config,
        "rng": rng_states,
        "extra": extra or {},
        "tensors": tensors,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not a checkpoint (bad header)") from exc
        if header.get("format") != FORMAT_NAME:
            raise ValueError(f"{path}: unknown checkpoint format")
        payload = fh.read()
    arrays = {}
    for t in header["tensors"]:
        raw = payload[t["offset"]:t["offset"] + t["nbytes"]]
        arrays[t["name"]] = np.frombuffer(raw, dtype="<f4").reshape(
            t["shape"]).copy()
    return Checkpoint(arrays=arrays, config=header["config"],
                      rng_states=header["rng"], step=header["step"],
                      extra=header.get("extra", {}))
