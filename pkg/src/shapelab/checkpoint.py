"""Single-file checkpoint container.

Layout: magic, format version, JSON header (vocab layout, model config,
global step, stage id, RNG state), then each parameter as a named
little-endian float32 array with explicit shape, and a trailing SHA-256
checksum over everything before it. Loading reproduces parameters
bit-exactly and restores the step counter and RNG state.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import ParamTree, Tensor
from .vocab import VocabSpec

MAGIC = b"SLCK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    params: ParamTree
    model_config: dict
    global_step: int = 0
    stage: int = 0
    rng_state: dict | None = None
    vocab: VocabSpec = field(default_factory=VocabSpec)
    extra: dict = field(default_factory=dict)

    def header(self):
        return {
            "format_version": FORMAT_VERSION,
            "vocab": self.vocab.to_dict(),
            "model_config": self.model_config,
            "global_step": self.global_step,
            "stage": self.stage,
            "rng_state": self.rng_state,
            "extra": self.extra,
            "arrays": [
                {"name": k, "shape": list(self.params[k].data.shape),
                 "trainable": bool(self.params[k].requires_grad)}
                for k in self.params.keys()
            ],
        }


def save_checkpoint(ckpt, path):
    buf = io.BytesIO()
    buf.write(MAGIC)
    header = json.dumps(ckpt.header(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for key in ckpt.params.keys():
        arr = np.ascontiguousarray(ckpt.params[key].data, dtype="<f4")
        buf.write(arr.tobytes())
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).digest()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(digest)
    return path


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ValueError(f"checkpoint checksum mismatch: {path}")
    if payload[:4] != MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    (hlen,) = struct.unpack("<I", payload[4:8])
    header = json.loads(payload[8:8 + hlen].decode("utf-8"))
    if header["format_version"] != FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format {header['format_version']}")
    params = ParamTree()
    offset = 8 + hlen
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n,
                            offset=offset).reshape(shape)
        offset += n * 4
        params[spec["name"]] = Tensor(arr.copy(),
                                      requires_grad=spec["trainable"])
    return Checkpoint(
        params=params,
        model_config=header["model_config"],
        global_step=header["global_step"],
        stage=header["stage"],
        rng_state=header["rng_state"],
        vocab=VocabSpec.from_dict(header["vocab"]),
        extra=header.get("extra", {}),
    )
