"""Checkpoint container.

Layout::

    AVGLM-CHECKPOINT\\n
    <one line of JSON: format_version, config, seed, epoch, valid_ppl,
     vocab_hash, and a tensor table of name/dtype/shape/offset/nbytes>\\n
    <raw little-endian arrays, concatenated in table order>

The JSON is written with sorted keys, so saving a loaded checkpoint
reproduces the original bytes.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointFormatError
from .model import AveragingLM, ModelConfig, ModelParams, expected_shapes

MAGIC = b"AVGLM-CHECKPOINT\n"
FORMAT_VERSION = 1


@dataclass
class CheckpointMeta:
    seed: int = 0
    epoch: int = 0
    valid_ppl: float = None
    vocab_hash: str = None
    extra: dict = field(default_factory=dict)


def _dtype_tag(arr):
    dt = arr.dtype.newbyteorder("<")
    return dt.str


def to_bytes(model, meta):
    table = []
    blobs = []
    offset = 0
    for name, t in model.named_parameters():
        arr = np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        table.append({"name": name, "dtype": _dtype_tag(arr), "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "seed": meta.seed,
        "epoch": meta.epoch,
        "valid_ppl": meta.valid_ppl,
        "vocab_hash": meta.vocab_hash,
        "extra": meta.extra,
        "tensors": table,
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    return MAGIC + line + b"".join(blobs)


def save(path, model, meta):
    data = to_bytes(model, meta)
    with open(path, "wb") as fh:
        fh.write(data)


def read_header(data):
    if not data.startswith(MAGIC):
        raise CheckpointFormatError("missing checkpoint magic", offset=0)
    start = len(MAGIC)
    end = data.find(b"\n", start)
    if end < 0:
        raise CheckpointFormatError("unterminated header", offset=start)
    try:
        header = json.loads(data[start:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}", offset=start) from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported format version {header.get('format_version')!r}", offset=start)
    return header, end + 1


def from_bytes(data):
    header, base = read_header(data)
    try:
        config = ModelConfig(**header["config"])
        table = header["tensors"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"bad header contents: {exc}", offset=len(MAGIC)) from None
    arrays = {}
    for entry in table:
        lo = base + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(data):
            raise CheckpointFormatError(f"tensor {entry['name']!r} truncated", offset=len(data))
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if count * dtype.itemsize != entry["nbytes"]:
            raise CheckpointFormatError(f"tensor {entry['name']!r} size does not match its shape", offset=lo)
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=lo).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(dtype.newbyteorder("="))
    expected = base + sum(e["nbytes"] for e in table)
    if expected != len(data):
        raise CheckpointFormatError("trailing bytes after last tensor", offset=expected)
    for name, shape in expected_shapes(config).items():
        if name not in arrays:
            raise CheckpointFormatError(f"missing tensor {name!r}", offset=len(MAGIC))
        if arrays[name].shape != shape:
            raise CheckpointFormatError(f"tensor {name!r} has shape {arrays[name].shape}, expected {shape}", offset=len(MAGIC))
    params = ModelParams.from_named(arrays, config.layers)
    meta = CheckpointMeta(
        seed=header.get("seed", 0),
        epoch=header.get("epoch", 0),
        valid_ppl=header.get("valid_ppl"),
        vocab_hash=header.get("vocab_hash"),
        extra=header.get("extra", {}),
    )
    return AveragingLM(config, params), meta


def load(path):
    with open(path, "rb") as fh:
        data = fh.read()
    return from_bytes(data)
