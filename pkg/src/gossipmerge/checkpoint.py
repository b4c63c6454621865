"""Fixed binary container for model parameters.

Layout: 4-byte magic, 1 version byte, 1 activation-tag length byte plus
its ASCII bytes, a uint32 dimension count, the architecture widths as
uint32, then every parameter as 64-bit little-endian floats in flatten
order. The format is byte-stable across runs so checkpoints diff and
compare exactly.
"""

from __future__ import annotations

import struct

import numpy as np

from .nn import ModelParams, flatten, layer_dims, param_count, unflatten

__all__ = ["load_model", "save_model"]

MAGIC = b"GMCP"
VERSION = 1


def save_model(path: str, model: ModelParams) -> None:
    dims = layer_dims(model)
    tag = model.activation.encode("ascii")
    if len(tag) > 255:
        raise ValueError("activation tag too long")
    blob = bytearray()
    blob += MAGIC
    blob += bytes([VERSION, len(tag)])
    blob += tag
    blob += struct.pack("<I", len(dims))
    blob += struct.pack(f"<{len(dims)}I", *dims)
    blob += np.ascontiguousarray(flatten(model), dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_model(path: str) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path} is not a model checkpoint (bad magic)")
    if blob[4] != VERSION:
        raise ValueError(f"unsupported checkpoint version {blob[4]}")
    tag_len = blob[5]
    at = 6
    activation = blob[at:at + tag_len].decode("ascii")
    at += tag_len
    (n_dims,) = struct.unpack_from("<I", blob, at)
    at += 4
    dims = list(struct.unpack_from(f"<{n_dims}I", blob, at))
    at += 4 * n_dims
    expected = param_count(dims)
    params = np.frombuffer(blob, dtype="<f8", count=-1, offset=at)
    if params.shape[0] != expected:
        raise ValueError(
            f"checkpoint holds {params.shape[0]} parameters, architecture {dims} needs {expected}")
    return unflatten(params.astype(np.float64), dims, activation)
