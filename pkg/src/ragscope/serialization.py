"""Binary weights container.

Layout: 8 magic bytes, a little-endian uint64 header length, a UTF-8 JSON
header, then raw little-endian row-major float32 tensor data. The header maps
each tensor name to {"dtype": "f32", "shape": [...], "offset": n} where the
offset counts bytes from the start of the data section. The model config
rides along in the header under "config".
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, Weights, tensor_shapes

MAGIC = b"RGSCOPE1"


class WeightsFormatError(ValueError):
    pass


def save_weights(weights: Weights, path, config_path=None) -> None:
    names = list(tensor_shapes(weights.config))
    entries, blobs, offset = {}, [], 0
    for name in names:
        arr = np.ascontiguousarray(weights[name], dtype="<f4")
        entries[name] = {"dtype": "f32", "shape": list(arr.shape), "offset": offset}
        blobs.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    header = json.dumps(
        {"config": json.loads(weights.config.to_json()), "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    if config_path is not None:
        Path(config_path).write_text(weights.config.to_json() + "\n")


def load_weights(path) -> Weights:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise WeightsFormatError(f"{path}: not a weights file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16 : 16 + hlen])
    except json.JSONDecodeError as e:
        raise WeightsFormatError(f"{path}: corrupt header ({e.msg})") from None
    config = ModelConfig.from_dict(header["config"])
    body = memoryview(data)[16 + hlen :]
    tensors = {}
    for name, meta in header["tensors"].items():
        if meta["dtype"] != "f32":
            raise WeightsFormatError(f"{name}: unsupported dtype {meta['dtype']}")
        n = int(np.prod(meta["shape"], dtype=np.int64))
        start = meta["offset"]
        if start + 4 * n > len(body):
            raise WeightsFormatError(f"{name}: data truncated")
        tensors[name] = np.frombuffer(body[start : start + 4 * n], dtype="<f4").reshape(meta["shape"])
    return Weights(config, {k: v.astype(np.float32) for k, v in tensors.items()})
