"""Versioned single-file model checkpoints.

Layout::

    b"QTRCKPT\\0" | uint32 LE header length | header (sorted-key JSON, UTF-8) | payload

The header records the format version, the model spec, the vocabulary
fingerprint, free-form metadata and a tensor table (name, shape, dtype,
frozen flag, byte offset).  Payload tensors are little-endian, C order,
concatenated in table order.  A SHA-256 of the payload guards against
truncation and bit rot.  Serialization is canonical, so save -> load -> save
reproduces the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .model import Model, ModelSpec, ParamStore
from .tokenizer import VocabMismatchError

MAGIC = b"QTRCKPT\0"
FORMAT_VERSION = 1
_DTYPES = {"<f8": np.float64, "<f4": np.float32}


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def to_bytes(model: Model) -> bytes:
    table, chunks, offset = [], [], 0
    for name in model.params:
        arr = model.params[name].data
        code = "<f4" if arr.dtype == np.float32 else "<f8"
        raw = np.ascontiguousarray(arr, dtype=np.dtype(code)).tobytes()
        table.append({"name": name, "shape": list(arr.shape), "dtype": code,
                      "frozen": name in model.params.frozen, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "version": FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "vocab_fingerprint": model.vocab_fingerprint,
        "metadata": _jsonable(model.metadata),
        "tensors": table,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + payload


def from_bytes(blob: bytes, expected_fingerprint: str | None = None) -> Model:
    if len(blob) < len(MAGIC) + 4 or not blob.startswith(MAGIC):
        raise CheckpointCorruptError("not a checkpoint file (bad magic or truncated preamble)")
    (n,) = struct.unpack_from("<I", blob, len(MAGIC))
    start = len(MAGIC) + 4
    if len(blob) < start + n:
        raise CheckpointCorruptError("truncated checkpoint header")
    try:
        header = json.loads(blob[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointCorruptError(f"unreadable checkpoint header: {e}") from None
    version = header.get("version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    payload = blob[start + n:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointCorruptError(
            f"payload is {len(payload)} bytes, header says {header['payload_bytes']} (truncated?)"
        )
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointCorruptError("payload checksum mismatch")
    fp = header["vocab_fingerprint"]
    if expected_fingerprint and fp and fp != expected_fingerprint:
        raise VocabMismatchError("checkpoint vocabulary fingerprint does not match the supplied vocabulary")

    params = ParamStore()
    for t in header["tensors"]:
        dtype = np.dtype(t["dtype"])
        count = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=t["offset"])
        params.add(t["name"], arr.reshape(t["shape"]).astype(_DTYPES[t["dtype"]]), frozen=t["frozen"])
    return Model(ModelSpec.from_dict(header["spec"]), params, fp, header["metadata"])


def save_checkpoint(model: Model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(model))
    return path


def load_checkpoint(path, expected_fingerprint: str | None = None) -> Model:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    return from_bytes(path.read_bytes(), expected_fingerprint)
